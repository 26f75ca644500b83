//! Independent straight-line oracles shared by the integration tests. Nothing
//! here calls the crate's tape or network code: weights are read by name and
//! every quantity is recomputed with plain loops.

#![allow(dead_code)]

use ugvae::nets::NetworkBundle;

const LV_MIN: f64 = -10.0;
const LV_MAX: f64 = 10.0;

#[derive(Clone, Copy)]
pub enum Act {
    Relu,
    Tanh,
}

pub struct Net {
    layers: Vec<(Vec<Vec<f64>>, Vec<f64>)>,
    hidden: Act,
}

impl Net {
    pub fn read(bundle: &NetworkBundle, prefix: &str, hidden: Act) -> Self {
        let mut layers = Vec::new();
        let p = &bundle.params;
        while let Some(wi) = p.index_of(&format!("{prefix}.{}.weight", layers.len())) {
            let bi = p.index_of(&format!("{prefix}.{}.bias", layers.len())).expect("bias");
            let w = p.tensor(wi).values.rows().into_iter().map(|r| r.to_vec()).collect();
            let b = p.tensor(bi).values.iter().copied().collect();
            layers.push((w, b));
        }
        assert!(!layers.is_empty(), "no layers under {prefix}");
        Self { layers, hidden }
    }

    /// Output before the head.
    pub fn raw(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for (li, (w, b)) in self.layers.iter().enumerate() {
            let mut out = b.clone();
            for (i, xi) in cur.iter().enumerate() {
                for (j, o) in out.iter_mut().enumerate() {
                    *o += xi * w[i][j];
                }
            }
            if li + 1 < self.layers.len() {
                for o in out.iter_mut() {
                    *o = match self.hidden {
                        Act::Relu => o.max(0.0),
                        Act::Tanh => o.tanh(),
                    };
                }
            }
            cur = out;
        }
        cur
    }

    pub fn gaussian(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let r = self.raw(x);
        let m = r.len() / 2;
        (r[..m].to_vec(), r[m..].iter().map(|v| v.clamp(LV_MIN, LV_MAX)).collect())
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|a| (a - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|a| a / s).collect()
}

pub fn kl_diag(qm: &[f64], qlv: &[f64], pm: &[f64], plv: &[f64]) -> f64 {
    let mut s = 0.0;
    for j in 0..qm.len() {
        let qv = qlv[j].exp();
        let pv = plv[j].exp();
        s += 0.5 * ((pv / qv).ln() + (qv + (qm[j] - pm[j]).powi(2)) / pv - 1.0);
    }
    s
}

pub struct Oracle {
    pub h: Net,
    pub phi_z: Net,
    pub phi_d: Net,
    pub phi_beta: Net,
    pub theta_z: Vec<Net>,
    pub theta_x: Net,
    pub k: usize,
}

#[derive(Debug, Clone)]
pub struct OracleElbo {
    pub recon: Vec<f64>,
    pub kl_z: Vec<f64>,
    pub kl_d: Vec<f64>,
    pub kl_beta: f64,
    pub elbo: f64,
    pub beta_mean: Vec<f64>,
    pub beta_log_var: Vec<f64>,
    /// Per member: `(π, [KL_k for each k])`.
    pub components: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Oracle {
    pub fn new(bundle: &NetworkBundle) -> Self {
        let k = bundle.k();
        Self {
            h: Net::read(bundle, "h", Act::Relu),
            phi_z: Net::read(bundle, "phi_z", Act::Relu),
            phi_d: Net::read(bundle, "phi_d", Act::Tanh),
            phi_beta: Net::read(bundle, "phi_beta", Act::Relu),
            theta_z: (0..k).map(|i| Net::read(bundle, &format!("theta_z.{i}"), Act::Tanh)).collect(),
            theta_x: Net::read(bundle, "theta_x", Act::Relu),
            k,
        }
    }

    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        self.h.raw(x).into_iter().map(|v| v.max(0.0)).collect()
    }

    pub fn decode(&self, z: &[f64], beta: &[f64]) -> Vec<f64> {
        let input: Vec<f64> = z.iter().chain(beta).copied().collect();
        self.theta_x.raw(&input).into_iter().map(|a| 1.0 / (1.0 + (-a).exp())).collect()
    }

    /// ELBO of a group (rows of `x`) with fixed reparameterisation noise.
    pub fn group_elbo(&self, x: &[Vec<f64>], eps_z: &[Vec<f64>], eps_beta: &[f64], sigma_x: f64) -> OracleElbo {
        let b = x.len();
        let mut qz = Vec::with_capacity(b);
        let mut zs = Vec::with_capacity(b);
        let mut pis = Vec::with_capacity(b);
        let mut prec_sum: Vec<f64> = Vec::new();
        let mut weighted: Vec<f64> = Vec::new();
        for i in 0..b {
            let f = self.features(&x[i]);
            let (m, lv) = self.phi_z.gaussian(&f);
            let z: Vec<f64> = (0..m.len()).map(|j| m[j] + (0.5 * lv[j]).exp() * eps_z[i][j]).collect();
            let pi = softmax(&self.phi_d.raw(&z));
            let input: Vec<f64> = f.iter().chain(&pi).copied().collect();
            let (cm, clv) = self.phi_beta.gaussian(&input);
            if prec_sum.is_empty() {
                prec_sum = vec![0.0; cm.len()];
                weighted = vec![0.0; cm.len()];
            }
            for j in 0..cm.len() {
                let p = (-clv[j]).exp();
                prec_sum[j] += p;
                weighted[j] += p * cm[j];
            }
            qz.push((m, lv));
            zs.push(z);
            pis.push(pi);
        }
        let beta_mean: Vec<f64> = weighted.iter().zip(&prec_sum).map(|(w, p)| w / p).collect();
        let beta_log_var: Vec<f64> = prec_sum.iter().map(|p| (-p.ln()).clamp(LV_MIN, LV_MAX)).collect();
        let beta: Vec<f64> = (0..beta_mean.len())
            .map(|j| beta_mean[j] + (0.5 * beta_log_var[j]).exp() * eps_beta[j])
            .collect();
        let priors: Vec<(Vec<f64>, Vec<f64>)> = self.theta_z.iter().map(|n| n.gaussian(&beta)).collect();
        let var = sigma_x * sigma_x;
        let mut out = OracleElbo {
            recon: Vec::new(),
            kl_z: Vec::new(),
            kl_d: Vec::new(),
            kl_beta: 0.0,
            elbo: 0.0,
            beta_mean: beta_mean.clone(),
            beta_log_var: beta_log_var.clone(),
            components: Vec::new(),
        };
        for i in 0..b {
            let mean = self.decode(&zs[i], &beta);
            let recon: f64 = x[i]
                .iter()
                .zip(&mean)
                .map(|(xv, mv)| -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * (xv - mv).powi(2) / var)
                .sum();
            let kls: Vec<f64> = priors.iter().map(|(pm, plv)| kl_diag(&qz[i].0, &qz[i].1, pm, plv)).collect();
            let kl_z: f64 = pis[i].iter().zip(&kls).map(|(p, k)| p * k).sum();
            let kl_d: f64 = pis[i]
                .iter()
                .filter(|p| **p > 0.0)
                .map(|p| p * (p * self.k as f64).ln())
                .sum();
            out.recon.push(recon);
            out.kl_z.push(kl_z);
            out.kl_d.push(kl_d);
            out.components.push((pis[i].clone(), kls));
        }
        let g = beta_mean.len();
        out.kl_beta = kl_diag(&beta_mean, &beta_log_var, &vec![0.0; g], &vec![0.0; g]);
        out.elbo = out.recon.iter().sum::<f64>() - out.kl_z.iter().sum::<f64>() - out.kl_d.iter().sum::<f64>()
            - out.kl_beta;
        out
    }
}

/// Physicists' Gauss-Hermite nodes and weights (`∫ e^{-x²} f(x) dx`),
/// by Newton iteration on the orthonormal Hermite recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let mut z = 0.0_f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (j + 1) as f64).sqrt() * p2 - (j as f64 / (j + 1) as f64).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// `E[f(ε)]` for `ε ~ N(0, 1)` as nodes and probability weights.
pub fn normal_quadrature(n: usize) -> Vec<(f64, f64)> {
    let (x, w) = gauss_hermite(n);
    let norm = std::f64::consts::PI.sqrt();
    x.iter()
        .zip(&w)
        .map(|(xi, wi)| (std::f64::consts::SQRT_2 * xi, wi / norm))
        .collect()
}

/// Stable `ln Σ exp(v)`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|a| (a - max).exp()).sum::<f64>().ln()
}

/// Kolmogorov-Smirnov statistic of `samples` against N(0, 1).
pub fn ks_statistic_normal(samples: &mut [f64]) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    let mut d = 0.0_f64;
    for (i, &s) in samples.iter().enumerate() {
        let cdf = normal_cdf(s);
        d = d.max((i + 1) as f64 / n - cdf).max(cdf - i as f64 / n);
    }
    d
}

/// Standard normal CDF via the complementary error function (Numerical
/// Recipes `erfcc`, relative error below 1.2e-7).
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t * (-z * z - 1.26551223
        + t * (1.00002368
            + t * (0.37409196
                + t * (0.09678418
                    + t * (-0.18628806
                        + t * (0.27886807 + t * (-1.13520398 + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277)))))))))
        .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}
