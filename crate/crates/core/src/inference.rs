//! Structured variational family `q(Z|X) q(d|Z) q(β|X,Z)`.
//!
//! The global posterior is a product of per-sample Gaussian contributions:
//! precisions add across the group, so every member adds evidence about the
//! shared `β`.

use ndarray::Array2;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nets::{softmax_from_log, split_gaussian, HeadOutput, NetworkBundle};
use crate::numerics::{CategoricalDist, DiagGaussian, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::rng::RngStream;

/// Standard-normal noise for one group: one `ε_z` row per member and one `ε_β`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNoise {
    pub eps_z: Array2<f64>,
    pub eps_beta: Vec<f64>,
}

impl GroupNoise {
    pub fn zeros(b: usize, d: usize, g: usize) -> Self {
        Self {
            eps_z: Array2::zeros((b, d)),
            eps_beta: vec![0.0; g],
        }
    }

    /// Draws `ε_z` row by row from `z_rng` and `ε_β` from `beta_rng`.
    pub fn draw(b: usize, d: usize, g: usize, z_rng: &mut RngStream, beta_rng: &mut RngStream) -> Self {
        let eps_z = Array2::from_shape_fn((b, d), |_| z_rng.normal());
        let eps_beta = beta_rng.normals(g);
        Self { eps_z, eps_beta }
    }

    /// Both noise blocks from a single stream (z first).
    pub fn draw_single(b: usize, d: usize, g: usize, rng: &mut RngStream) -> Self {
        let eps_z = Array2::from_shape_fn((b, d), |_| rng.normal());
        let eps_beta = rng.normals(g);
        Self { eps_z, eps_beta }
    }

    pub fn group_size(&self) -> usize {
        self.eps_z.nrows()
    }

    /// Reorders members; `order[i]` is the old index of new member `i`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            eps_z: self.eps_z.select(ndarray::Axis(0), order),
            eps_beta: self.eps_beta.clone(),
        }
    }
}

/// Tape nodes of the variational posterior for one group.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorNodes {
    /// Pre-encoder features `h(x)`, `B × H`.
    pub features: Var,
    pub qz_mean: Var,
    pub qz_log_var: Var,
    /// Reparameterised `z`, `B × d`.
    pub z: Var,
    /// `ln q(d|z)`, `B × K`.
    pub log_pi: Var,
    pub pi: Var,
    pub contrib_mean: Var,
    pub contrib_log_var: Var,
    /// `1 × g`.
    pub beta_mean: Var,
    pub beta_log_var: Var,
    /// Reparameterised `β`, `1 × g`.
    pub beta: Var,
}

fn check_group(x: &Array2<f64>, bundle: &NetworkBundle, noise: &GroupNoise) -> Result<()> {
    let dims = bundle.dims;
    if x.nrows() == 0 {
        return Err(Error::contract("group must hold at least one sample"));
    }
    if x.ncols() != dims.data_dim {
        return Err(Error::contract(format!(
            "data width {} but model expects {}",
            x.ncols(),
            dims.data_dim
        )));
    }
    if noise.eps_z.dim() != (x.nrows(), dims.d_local) || noise.eps_beta.len() != dims.g_global {
        return Err(Error::contract("noise shape does not match group and model"));
    }
    Ok(())
}

/// Records the whole inference network for a `B × D` group.
pub fn posterior_on_tape(
    bundle: &NetworkBundle,
    tape: &mut Tape,
    x: &Array2<f64>,
    noise: &GroupNoise,
) -> Result<PosteriorNodes> {
    check_group(x, bundle, noise)?;
    let p = &bundle.params;
    let xv = tape.constant(x.clone());
    let features = bundle.h.on_tape(p, tape, xv)?;

    let qz_raw = bundle.phi_z.on_tape(p, tape, features)?;
    let (qz_mean, qz_log_var) = split_gaussian(tape, qz_raw)?;
    let z = reparam_on_tape(tape, qz_mean, qz_log_var, noise.eps_z.clone())?;

    let log_pi = bundle.phi_d.on_tape(p, tape, z)?;
    let pi = tape.exp(log_pi);

    let beta_in = tape.concat_cols(&[features, pi])?;
    let c_raw = bundle.phi_beta.on_tape(p, tape, beta_in)?;
    let (contrib_mean, contrib_log_var) = split_gaussian(tape, c_raw)?;

    let neg = tape.scale(contrib_log_var, -1.0);
    let precision = tape.exp(neg);
    let total_precision = tape.sum_rows(precision);
    let weighted = tape.mul(precision, contrib_mean)?;
    let weighted = tape.sum_rows(weighted);
    let beta_mean = tape.div(weighted, total_precision)?;
    let log_total = tape.log(total_precision);
    let beta_log_var = tape.scale(log_total, -1.0);
    let beta_log_var = tape.clamp(beta_log_var, LOG_VAR_MIN, LOG_VAR_MAX);

    let eps_beta = Array2::from_shape_vec((1, noise.eps_beta.len()), noise.eps_beta.clone())
        .expect("row");
    let beta = reparam_on_tape(tape, beta_mean, beta_log_var, eps_beta)?;

    Ok(PosteriorNodes {
        features,
        qz_mean,
        qz_log_var,
        z,
        log_pi,
        pi,
        contrib_mean,
        contrib_log_var,
        beta_mean,
        beta_log_var,
        beta,
    })
}

/// `mean + exp(0.5 log_var) ⊙ eps` on the tape.
pub fn reparam_on_tape(tape: &mut Tape, mean: Var, log_var: Var, eps: Array2<f64>) -> Result<Var> {
    let half = tape.scale(log_var, 0.5);
    let std = tape.exp(half);
    let e = tape.constant(eps);
    let spread = tape.mul(std, e)?;
    tape.add(mean, spread)
}

/// Values of the variational posterior for one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPosterior {
    pub qz: Vec<DiagGaussian>,
    pub qd: Vec<CategoricalDist>,
    pub contributions: Vec<DiagGaussian>,
    pub qbeta: DiagGaussian,
    pub z: Array2<f64>,
    pub beta: Vec<f64>,
}

fn row_gaussians(tape: &Tape, mean: Var, log_var: Var) -> Result<Vec<DiagGaussian>> {
    tape.value(mean)
        .rows()
        .into_iter()
        .zip(tape.value(log_var).rows())
        .map(|(m, lv)| DiagGaussian::new(m.to_vec(), lv.to_vec()))
        .collect()
}

impl GroupPosterior {
    pub fn from_tape(tape: &Tape, nodes: &PosteriorNodes) -> Result<Self> {
        let qz = row_gaussians(tape, nodes.qz_mean, nodes.qz_log_var)?;
        let qd = tape
            .value(nodes.log_pi)
            .rows()
            .into_iter()
            .map(|r| softmax_from_log(r.as_slice().expect("row-major")))
            .collect::<Result<Vec<_>>>()?;
        let contributions = row_gaussians(tape, nodes.contrib_mean, nodes.contrib_log_var)?;
        let qbeta = row_gaussians(tape, nodes.beta_mean, nodes.beta_log_var)?
            .pop()
            .expect("one row");
        Ok(Self {
            qz,
            qd,
            contributions,
            qbeta,
            z: tape.value(nodes.z).clone(),
            beta: tape.value(nodes.beta).iter().copied().collect(),
        })
    }
}

pub fn infer_group_with_noise(
    x: &Array2<f64>,
    bundle: &NetworkBundle,
    noise: &GroupNoise,
) -> Result<GroupPosterior> {
    let mut tape = Tape::new();
    let nodes = posterior_on_tape(bundle, &mut tape, x, noise)?;
    GroupPosterior::from_tape(&tape, &nodes)
}

pub fn infer_group(x: &Array2<f64>, bundle: &NetworkBundle, rng: &mut RngStream) -> Result<GroupPosterior> {
    if x.nrows() == 0 {
        return Err(Error::contract("group must hold at least one sample"));
    }
    let d = bundle.dims;
    let noise = GroupNoise::draw_single(x.nrows(), d.d_local, d.g_global, rng);
    infer_group_with_noise(x, bundle, &noise)
}

/// `q(z | x)`.
pub fn encode_z(x: &[f64], bundle: &NetworkBundle) -> Result<DiagGaussian> {
    let HeadOutput::Vector(features) = bundle.h.forward(&bundle.params, x)? else {
        unreachable!("pre-encoder has an elementwise head")
    };
    match bundle.phi_z.forward(&bundle.params, &features)? {
        HeadOutput::Gaussian(g) => Ok(g),
        _ => unreachable!("phi_z has a split-gaussian head"),
    }
}

/// `q(d | z)`.
pub fn classify_d(z: &[f64], bundle: &NetworkBundle) -> Result<CategoricalDist> {
    match bundle.phi_d.forward(&bundle.params, z)? {
        HeadOutput::Categorical(c) => Ok(c),
        _ => unreachable!("phi_d has a softmax head"),
    }
}

/// Per-sample global contribution `phi_beta([h(x), π])`.
pub fn beta_contribution(x: &[f64], pi: &CategoricalDist, bundle: &NetworkBundle) -> Result<DiagGaussian> {
    if pi.k() != bundle.k() {
        return Err(Error::contract(format!("pi has {} entries, K = {}", pi.k(), bundle.k())));
    }
    let HeadOutput::Vector(mut input) = bundle.h.forward(&bundle.params, x)? else {
        unreachable!("pre-encoder has an elementwise head")
    };
    input.extend_from_slice(pi.probs());
    match bundle.phi_beta.forward(&bundle.params, &input)? {
        HeadOutput::Gaussian(g) => Ok(g),
        _ => unreachable!("phi_beta has a split-gaussian head"),
    }
}
