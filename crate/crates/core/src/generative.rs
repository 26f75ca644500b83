//! The generative model `p(X, Z, d, β) = p(X|Z,β) p(Z|d,β) p(d) p(β)` for one
//! group, plus ancestral sampling.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nets::{split_gaussian, ModelDims, NetworkBundle};
use crate::numerics::{
    gaussian_log_density, kl_categorical, reparameterize, sample_categorical, CategoricalDist,
    DiagGaussian,
};
use crate::rng::RngStream;

pub const DEFAULT_SIGMA_X: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerativeConfig {
    pub dims: ModelDims,
    /// Standard deviation of the Gaussian likelihood.
    pub sigma_x: f64,
    /// Group size `B`.
    pub group_size: usize,
}

impl GenerativeConfig {
    pub fn new(dims: ModelDims, sigma_x: f64, group_size: usize) -> Result<Self> {
        dims.validate()?;
        if !(sigma_x > 0.0) || !sigma_x.is_finite() {
            return Err(Error::contract(format!("sigma_x must be positive, got {sigma_x}")));
        }
        if group_size == 0 {
            return Err(Error::contract("group size must be >= 1"));
        }
        Ok(Self {
            dims,
            sigma_x,
            group_size,
        })
    }

    pub fn likelihood_log_var(&self) -> f64 {
        (self.sigma_x * self.sigma_x).ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSample {
    pub beta: Vec<f64>,
    pub components: Vec<usize>,
    /// `B × d`.
    pub z: Array2<f64>,
    /// `B × D`.
    pub x: Array2<f64>,
}

pub fn prior_beta(config: &GenerativeConfig) -> DiagGaussian {
    DiagGaussian::standard(config.dims.g_global)
}

pub fn prior_d(config: &GenerativeConfig) -> CategoricalDist {
    CategoricalDist::uniform(config.dims.k)
}

fn check_component(k: usize, bundle: &NetworkBundle) -> Result<()> {
    if k >= bundle.k() {
        return Err(Error::contract(format!(
            "component {k} out of range for K = {}",
            bundle.k()
        )));
    }
    Ok(())
}

/// Records `theta_z^(k)(β)` for a `1 × g` β node; returns `(mean, log_var)`, each `1 × d`.
pub fn prior_z_on_tape(
    bundle: &NetworkBundle,
    tape: &mut Tape,
    k: usize,
    beta: Var,
) -> Result<(Var, Var)> {
    check_component(k, bundle)?;
    let raw = bundle.theta_z[k].on_tape(&bundle.params, tape, beta)?;
    split_gaussian(tape, raw)
}

/// Records the decoder mean for `B × d` latents sharing one `1 × g` β.
pub fn decoder_mean_on_tape(bundle: &NetworkBundle, tape: &mut Tape, z: Var, beta: Var) -> Result<Var> {
    let rows = tape.shape(z).0;
    let shared = tape.broadcast_rows(beta, rows)?;
    let input = tape.concat_cols(&[z, shared])?;
    bundle.theta_x.on_tape(&bundle.params, tape, input)
}

/// `p(z | d = k, β)`.
pub fn prior_z_given(k: usize, beta: &[f64], bundle: &NetworkBundle) -> Result<DiagGaussian> {
    check_component(k, bundle)?;
    if beta.len() != bundle.dims.g_global {
        return Err(Error::contract(format!(
            "beta has {} entries, expected {}",
            beta.len(),
            bundle.dims.g_global
        )));
    }
    let mut tape = Tape::new();
    let b = tape.row(beta);
    let (mean, lv) = prior_z_on_tape(bundle, &mut tape, k, b)?;
    DiagGaussian::new(
        tape.value(mean).iter().copied().collect(),
        tape.value(lv).iter().copied().collect(),
    )
}

/// Decoder means for each row of `z` under one shared β.
pub fn decode_means(z: &Array2<f64>, beta: &[f64], bundle: &NetworkBundle) -> Result<Array2<f64>> {
    let dims = bundle.dims;
    if z.ncols() != dims.d_local || beta.len() != dims.g_global {
        return Err(Error::contract(format!(
            "decode expects z width {} and beta width {}, got {} and {}",
            dims.d_local,
            dims.g_global,
            z.ncols(),
            beta.len()
        )));
    }
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let bv = tape.row(beta);
    let mean = decoder_mean_on_tape(bundle, &mut tape, zv, bv)?;
    Ok(tape.value(mean).clone())
}

/// `p(x | z, β) = N(theta_x([z, β]), σ_x² I)`.
pub fn decode_x(
    z: &[f64],
    beta: &[f64],
    bundle: &NetworkBundle,
    config: &GenerativeConfig,
) -> Result<DiagGaussian> {
    let zm = Array2::from_shape_vec((1, z.len()), z.to_vec()).expect("row");
    let mean = decode_means(&zm, beta, bundle)?;
    let n = mean.ncols();
    DiagGaussian::new(mean.into_raw_vec_and_offset().0, vec![config.likelihood_log_var(); n])
}

/// Ancestral sampling in the order β, then for each member `d_i`, `z_i`, `x_i`.
/// Pixels are not clipped.
pub fn sample_group(
    config: &GenerativeConfig,
    bundle: &NetworkBundle,
    rng: &mut RngStream,
) -> Result<GroupSample> {
    let dims = config.dims;
    let b = config.group_size;
    let beta = reparameterize(&prior_beta(config), rng);
    let priors = (0..dims.k)
        .map(|k| prior_z_given(k, &beta, bundle))
        .collect::<Result<Vec<_>>>()?;
    let pd = prior_d(config);

    let mut components = Vec::with_capacity(b);
    let mut z = Array2::zeros((b, dims.d_local));
    let mut x = Array2::zeros((b, dims.data_dim));
    for i in 0..b {
        let k = sample_categorical(&pd, rng);
        components.push(k);
        let zi = reparameterize(&priors[k], rng);
        let px = decode_x(&zi, &beta, bundle, config)?;
        let xi = reparameterize(&px, rng);
        z.row_mut(i).assign(&ndarray::ArrayView1::from(&zi));
        x.row_mut(i).assign(&ndarray::ArrayView1::from(&xi));
    }
    Ok(GroupSample {
        beta,
        components,
        z,
        x,
    })
}

/// The four factors of the joint log-density of a group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogJoint {
    pub log_px: f64,
    pub log_pz: f64,
    pub log_pd: f64,
    pub log_pbeta: f64,
}

impl LogJoint {
    pub fn total(&self) -> f64 {
        self.log_px + self.log_pz + self.log_pd + self.log_pbeta
    }
}

pub fn log_joint(
    sample: &GroupSample,
    bundle: &NetworkBundle,
    config: &GenerativeConfig,
) -> Result<LogJoint> {
    let dims = config.dims;
    let log_pbeta = gaussian_log_density(&sample.beta, &prior_beta(config))?;
    // ln(1/K) per member; kl against the uniform prior of a one-hot is ln K.
    let one_hot_kl = kl_categorical(&CategoricalDist::one_hot(dims.k, 0), &prior_d(config))?;
    let log_pd = -(sample.components.len() as f64) * one_hot_kl;

    let means = decode_means(&sample.z, &sample.beta, bundle)?;
    let lv = config.likelihood_log_var();
    let mut log_px = 0.0;
    let mut log_pz = 0.0;
    for (i, &k) in sample.components.iter().enumerate() {
        let prior = prior_z_given(k, &sample.beta, bundle)?;
        let zi: Vec<f64> = sample.z.row(i).to_vec();
        log_pz += gaussian_log_density(&zi, &prior)?;
        let px = DiagGaussian::new(means.row(i).to_vec(), vec![lv; dims.data_dim])?;
        log_px += gaussian_log_density(&sample.x.row(i).to_vec(), &px)?;
    }
    Ok(LogJoint {
        log_px,
        log_pz,
        log_pd,
        log_pbeta,
    })
}
