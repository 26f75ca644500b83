//! Adaptive-moment optimizer with global-norm gradient clipping.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::nets::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Gradients are rescaled when their global L2 norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(100.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    /// First moments, aligned with the parameter store.
    pub m1: Vec<Matrix>,
    /// Second moments.
    pub m2: Vec<Matrix>,
    pub step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Result<Self> {
        if !(config.learning_rate > 0.0) {
            return Err(Error::contract(format!(
                "learning rate must be positive, got {}",
                config.learning_rate
            )));
        }
        let zeros = || params.iter().map(|t| Array2::zeros(t.values.dim())).collect();
        Ok(Self {
            config,
            m1: zeros(),
            m2: zeros(),
            step: 0,
        })
    }

    /// Applies one update from the accumulated gradients. Gradients are left in place.
    pub fn step(&mut self, params: &mut ParamStore) -> StepStats {
        let grad_norm = params
            .iter()
            .map(|t| t.grad.iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let scale = match self.config.clip_norm {
            Some(max) if grad_norm > max => max / grad_norm,
            _ => 1.0,
        };
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
            ..
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, tensor) in params.iter_mut().enumerate() {
            let m1 = self.m1[i].as_slice_mut().expect("contiguous");
            let m2 = self.m2[i].as_slice_mut().expect("contiguous");
            let grad = tensor.grad.as_slice().expect("contiguous");
            let values = tensor.values.as_slice_mut().expect("contiguous");
            for j in 0..values.len() {
                let g = grad[j] * scale;
                m1[j] = b1 * m1[j] + (1.0 - b1) * g;
                m2[j] = b2 * m2[j] + (1.0 - b2) * g * g;
                let m_hat = m1[j] / c1;
                let v_hat = m2[j] / c2;
                values[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        StepStats {
            grad_norm,
            clipped: scale < 1.0,
        }
    }

    /// Rounds the moments to single precision.
    pub fn round_to_f32(&mut self) {
        for m in self.m1.iter_mut().chain(self.m2.iter_mut()) {
            m.mapv_inplace(|v| v as f32 as f64);
        }
    }
}

/// Rounds parameter values to single precision.
pub fn round_params_to_f32(params: &mut ParamStore) {
    for t in params.iter_mut() {
        t.values.mapv_inplace(|v| v as f32 as f64);
    }
}
