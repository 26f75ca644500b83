//! Group ELBO with the discrete component marginalised analytically.
//!
//! For a group `X` of `B` members:
//!
//! ```text
//! ELBO = Σ_i [ ln p(x_i | z_i, β)
//!              − Σ_k q(k|z_i) KL(q(z_i|x_i) ‖ p(z_i|k, β))
//!              − KL(q(d_i|z_i) ‖ Uniform(K)) ]
//!        − KL(q(β|X,Z) ‖ N(0, I))
//! ```
//!
//! with one reparameterised sample each of `z_i` and `β`. `q(β|X,Z)` is a
//! deterministic function of the soft assignments, so the global KL is
//! evaluated once per group.

use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::generative::{decode_x, decoder_mean_on_tape, prior_z_given, prior_z_on_tape, GenerativeConfig};
use crate::inference::{posterior_on_tape, GroupNoise, GroupPosterior, PosteriorNodes};
use crate::nets::NetworkBundle;
use crate::numerics::{
    gaussian_log_density, kl_categorical, kl_gaussian_diag, CategoricalDist, DiagGaussian,
    HALF_LOG_2PI,
};
use crate::rng::RngStream;

/// Per-member terms of the ELBO.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalTerms {
    pub recon: f64,
    pub kl_z: f64,
    pub kl_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub recon: f64,
    pub kl_z: f64,
    pub kl_d: f64,
    pub kl_beta: f64,
    pub elbo: f64,
    pub per_sample: Vec<LocalTerms>,
}

impl ElboBreakdown {
    pub fn group_size(&self) -> usize {
        self.per_sample.len()
    }

    pub fn is_finite(&self) -> bool {
        [self.recon, self.kl_z, self.kl_d, self.kl_beta, self.elbo]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl fmt::Display for ElboBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "elbo={} recon={} kl_z={} kl_d={} kl_beta={} (B={})",
            self.elbo,
            self.recon,
            self.kl_z,
            self.kl_d,
            self.kl_beta,
            self.per_sample.len()
        )
    }
}

/// Tape nodes of the group ELBO.
#[derive(Debug, Clone, Copy)]
pub struct ElboNodes {
    pub posterior: PosteriorNodes,
    /// `B × 1` columns.
    pub recon: Var,
    pub kl_z: Var,
    pub kl_d: Var,
    /// `1 × 1`.
    pub kl_beta: Var,
    pub elbo: Var,
}

/// `KL(N(qm, qlv) ‖ N(pm, plv))` summed over columns, `B × 1`.
fn kl_rows_on_tape(tape: &mut Tape, qm: Var, qlv: Var, pm: Var, plv: Var) -> Result<Var> {
    let lv_diff = tape.sub(plv, qlv)?;
    let ratio_log = tape.sub(qlv, plv)?;
    let ratio = tape.exp(ratio_log);
    let delta = tape.sub(qm, pm)?;
    let delta_sq = tape.square(delta);
    let neg_plv = tape.scale(plv, -1.0);
    let inv_p = tape.exp(neg_plv);
    let mahal = tape.mul(delta_sq, inv_p)?;
    let acc = tape.add(lv_diff, ratio)?;
    let acc = tape.add(acc, mahal)?;
    let acc = tape.add_scalar(acc, -1.0);
    let per_row = tape.sum_cols(acc);
    Ok(tape.scale(per_row, 0.5))
}

pub fn elbo_on_tape(
    bundle: &NetworkBundle,
    config: &GenerativeConfig,
    tape: &mut Tape,
    x: &Array2<f64>,
    noise: &GroupNoise,
) -> Result<ElboNodes> {
    let dims = bundle.dims;
    let b = x.nrows();
    let post = posterior_on_tape(bundle, tape, x, noise)?;

    // Reconstruction, d-independent.
    let mean = decoder_mean_on_tape(bundle, tape, post.z, post.beta)?;
    let xv = tape.constant(x.clone());
    let diff = tape.sub(xv, mean)?;
    let sq = tape.square(diff);
    let sq = tape.sum_cols(sq);
    let var = config.sigma_x * config.sigma_x;
    let recon = tape.scale(sq, -0.5 / var);
    let recon = tape.add_scalar(
        recon,
        dims.data_dim as f64 * (-HALF_LOG_2PI - config.sigma_x.ln()),
    );

    // Local KL expected over q(d|z).
    let mut per_component = Vec::with_capacity(dims.k);
    for k in 0..dims.k {
        let (pm, plv) = prior_z_on_tape(bundle, tape, k, post.beta)?;
        let pm = tape.broadcast_rows(pm, b)?;
        let plv = tape.broadcast_rows(plv, b)?;
        per_component.push(kl_rows_on_tape(tape, post.qz_mean, post.qz_log_var, pm, plv)?);
    }
    let kl_matrix = tape.concat_cols(&per_component)?;
    let weighted = tape.mul(post.pi, kl_matrix)?;
    let kl_z = tape.sum_cols(weighted);

    // KL(q(d|z) ‖ Uniform(K)) = Σ π (ln π + ln K).
    let shifted = tape.add_scalar(post.log_pi, (dims.k as f64).ln());
    let kl_d = tape.mul(post.pi, shifted)?;
    let kl_d = tape.sum_cols(kl_d);

    // KL(q(β) ‖ N(0, I)).
    let var_b = tape.exp(post.beta_log_var);
    let mean_sq = tape.square(post.beta_mean);
    let acc = tape.sub(var_b, post.beta_log_var)?;
    let acc = tape.add(acc, mean_sq)?;
    let acc = tape.add_scalar(acc, -1.0);
    let acc = tape.sum_all(acc);
    let kl_beta = tape.scale(acc, 0.5);

    let recon_total = tape.sum_all(recon);
    let kl_z_total = tape.sum_all(kl_z);
    let kl_d_total = tape.sum_all(kl_d);
    let elbo = tape.sub(recon_total, kl_z_total)?;
    let elbo = tape.sub(elbo, kl_d_total)?;
    let elbo = tape.sub(elbo, kl_beta)?;

    Ok(ElboNodes {
        posterior: post,
        recon,
        kl_z,
        kl_d,
        kl_beta,
        elbo,
    })
}

fn column(tape: &Tape, v: Var) -> Vec<f64> {
    tape.value(v).iter().copied().collect()
}

impl ElboBreakdown {
    pub fn from_tape(tape: &Tape, nodes: &ElboNodes) -> Self {
        let recon = column(tape, nodes.recon);
        let kl_z = column(tape, nodes.kl_z);
        let kl_d = column(tape, nodes.kl_d);
        let per_sample = recon
            .iter()
            .zip(&kl_z)
            .zip(&kl_d)
            .map(|((r, z), d)| LocalTerms {
                recon: *r,
                kl_z: *z,
                kl_d: *d,
            })
            .collect();
        use crate::numerics::compensated_sum;
        Self {
            recon: compensated_sum(recon),
            kl_z: compensated_sum(kl_z),
            kl_d: compensated_sum(kl_d),
            kl_beta: tape.scalar(nodes.kl_beta),
            elbo: tape.scalar(nodes.elbo),
            per_sample,
        }
    }
}

/// Local ELBO terms of member `i` from posterior values.
pub fn local_elbo(
    x_i: &[f64],
    posterior: &GroupPosterior,
    i: usize,
    beta: &[f64],
    bundle: &NetworkBundle,
    config: &GenerativeConfig,
) -> Result<LocalTerms> {
    if i >= posterior.qz.len() {
        return Err(Error::contract(format!(
            "member {i} out of range for group of {}",
            posterior.qz.len()
        )));
    }
    let z_i = posterior.z.row(i).to_vec();
    let recon = gaussian_log_density(x_i, &decode_x(&z_i, beta, bundle, config)?)?;
    let qd = &posterior.qd[i];
    let mut kl_z = 0.0;
    for (k, &w) in qd.probs().iter().enumerate() {
        kl_z += w * kl_gaussian_diag(&posterior.qz[i], &prior_z_given(k, beta, bundle)?)?;
    }
    let kl_d = kl_categorical(qd, &CategoricalDist::uniform(bundle.k()))?;
    Ok(LocalTerms { recon, kl_z, kl_d })
}

pub fn group_elbo_with_noise(
    x: &Array2<f64>,
    bundle: &NetworkBundle,
    config: &GenerativeConfig,
    noise: &GroupNoise,
) -> Result<ElboBreakdown> {
    let mut tape = Tape::new();
    let nodes = elbo_on_tape(bundle, config, &mut tape, x, noise)?;
    Ok(ElboBreakdown::from_tape(&tape, &nodes))
}

pub fn group_elbo(
    x: &Array2<f64>,
    bundle: &NetworkBundle,
    config: &GenerativeConfig,
    rng: &mut RngStream,
) -> Result<ElboBreakdown> {
    if x.nrows() == 0 {
        return Err(Error::contract("group must hold at least one sample"));
    }
    let d = bundle.dims;
    let noise = GroupNoise::draw_single(x.nrows(), d.d_local, d.g_global, rng);
    group_elbo_with_noise(x, bundle, config, &noise)
}

/// A recorded loss ready for [`Tape::backward`].
#[derive(Debug)]
pub struct LossGraph {
    pub tape: Tape,
    /// `−ELBO / B`.
    pub loss: Var,
    pub breakdown: ElboBreakdown,
}

impl LossGraph {
    pub fn value(&self) -> f64 {
        self.tape.scalar(self.loss)
    }
}

/// `−ELBO / B`; a non-finite value is reported as divergence.
pub fn loss(
    x: &Array2<f64>,
    bundle: &NetworkBundle,
    config: &GenerativeConfig,
    noise: &GroupNoise,
) -> Result<LossGraph> {
    let mut tape = Tape::new();
    let nodes = elbo_on_tape(bundle, config, &mut tape, x, noise)?;
    let loss = tape.scale(nodes.elbo, -1.0 / x.nrows() as f64);
    let breakdown = ElboBreakdown::from_tape(&tape, &nodes);
    if !tape.scalar(loss).is_finite() || !breakdown.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            breakdown: Box::new(breakdown),
        });
    }
    Ok(LossGraph {
        tape,
        loss,
        breakdown,
    })
}

/// Convenience for the global KL term of a posterior.
pub fn kl_beta(qbeta: &DiagGaussian) -> Result<f64> {
    kl_gaussian_diag(qbeta, &DiagGaussian::standard(qbeta.dim()))
}
