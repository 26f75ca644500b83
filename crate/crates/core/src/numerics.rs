//! Closed-form densities, divergences and sampling primitives.

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// `-0.5 * ln(2π)`.
pub const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

pub fn clamp_log_var(v: f64) -> f64 {
    v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)
}

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut carry = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

/// Diagonal Gaussian in mean / log-variance form. Log-variances are clamped
/// to `[LOG_VAR_MIN, LOG_VAR_MAX]` on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::contract(format!(
                "mean has {} entries, log_var has {}",
                mean.len(),
                log_var.len()
            )));
        }
        if let Some(v) = log_var.iter().find(|v| v.is_nan()) {
            return Err(Error::contract(format!("log_var entry is {v}")));
        }
        let log_var = log_var.into_iter().map(clamp_log_var).collect();
        Ok(Self { mean, log_var })
    }

    pub fn standard(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            log_var: vec![0.0; n],
        }
    }

    /// Isotropic-per-coordinate constructor from variances.
    pub fn from_variance(mean: Vec<f64>, variance: &[f64]) -> Result<Self> {
        Self::new(mean, variance.iter().map(|v| v.ln()).collect())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| v.exp()).collect()
    }

    pub fn precision(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| (-v).exp()).collect()
    }
}

/// Probability vector over `K` components.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDist {
    probs: Vec<f64>,
}

impl CategoricalDist {
    pub const SIMPLEX_TOL: f64 = 1e-9;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::contract("categorical distribution needs K >= 1"));
        }
        if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::contract("categorical probabilities must be finite and >= 0"));
        }
        let total = compensated_sum(probs.iter().copied());
        if (total - 1.0).abs() > Self::SIMPLEX_TOL {
            return Err(Error::contract(format!(
                "categorical probabilities sum to {total}"
            )));
        }
        Ok(Self { probs })
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            probs: vec![1.0 / k as f64; k],
        }
    }

    pub fn one_hot(k: usize, index: usize) -> Self {
        let mut probs = vec![0.0; k];
        probs[index] = 1.0;
        Self { probs }
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }
}

fn check_dims(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::contract(format!("{what}: dimension {a} vs {b}")));
    }
    Ok(())
}

pub fn gaussian_log_density(x: &[f64], g: &DiagGaussian) -> Result<f64> {
    check_dims(x.len(), g.dim(), "gaussian_log_density")?;
    Ok(x
        .iter()
        .zip(g.mean.iter().zip(&g.log_var))
        .map(|(xi, (m, lv))| {
            let d = xi - m;
            -HALF_LOG_2PI - 0.5 * lv - 0.5 * d * d * (-lv).exp()
        })
        .sum())
}

/// `KL(q || p)` for diagonal Gaussians.
pub fn kl_gaussian_diag(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    check_dims(q.dim(), p.dim(), "kl_gaussian_diag")?;
    let mut total = 0.0;
    for i in 0..q.dim() {
        let (mq, lq) = (q.mean[i], q.log_var[i]);
        let (mp, lp) = (p.mean[i], p.log_var[i]);
        let d = mq - mp;
        total += 0.5 * (lp - lq + (lq - lp).exp() + d * d * (-lp).exp() - 1.0);
    }
    Ok(total)
}

/// `KL(q || p)` for categoricals with the `0 ln 0 = 0` convention.
pub fn kl_categorical(q: &CategoricalDist, p: &CategoricalDist) -> Result<f64> {
    check_dims(q.k(), p.k(), "kl_categorical")?;
    let mut total = 0.0;
    for (index, (&qk, &pk)) in q.probs.iter().zip(&p.probs).enumerate() {
        if qk == 0.0 {
            continue;
        }
        if pk == 0.0 {
            return Err(Error::InfiniteDivergence { index, q: qk });
        }
        total += qk * (qk / pk).ln();
    }
    Ok(total)
}

/// Product of diagonal Gaussian experts: precisions add, the mean is the
/// precision-weighted average. Sums are compensated so the result does not
/// depend on contribution order beyond rounding of the final division.
pub fn product_of_diag_gaussians(contribs: &[DiagGaussian]) -> Result<DiagGaussian> {
    let first = contribs
        .first()
        .ok_or_else(|| Error::contract("product of an empty set of Gaussians"))?;
    let n = first.dim();
    for c in contribs {
        check_dims(c.dim(), n, "product_of_diag_gaussians")?;
    }
    let mut mean = Vec::with_capacity(n);
    let mut log_var = Vec::with_capacity(n);
    for j in 0..n {
        let precision = compensated_sum(contribs.iter().map(|c| (-c.log_var[j]).exp()));
        let weighted = compensated_sum(contribs.iter().map(|c| (-c.log_var[j]).exp() * c.mean[j]));
        mean.push(weighted / precision);
        log_var.push(-precision.ln());
    }
    DiagGaussian::new(mean, log_var)
}

/// `mean + exp(0.5 log_var) * eps` for a caller-supplied `eps`.
pub fn reparameterize_with(g: &DiagGaussian, eps: &[f64]) -> Result<Vec<f64>> {
    check_dims(eps.len(), g.dim(), "reparameterize")?;
    Ok(g
        .mean
        .iter()
        .zip(&g.log_var)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

pub fn reparameterize(g: &DiagGaussian, rng: &mut RngStream) -> Vec<f64> {
    let eps = rng.normals(g.dim());
    reparameterize_with(g, &eps).expect("eps drawn with matching dimension")
}

/// Inverse-CDF draw over cumulative sums in index order.
pub fn sample_categorical(c: &CategoricalDist, rng: &mut RngStream) -> usize {
    let u = rng.uniform();
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (k, &p) in c.probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = k;
        }
        cumulative += p;
        if u < cumulative && p > 0.0 {
            return k;
        }
    }
    // Rounding left the cumulative sum just below u.
    last_positive
}

/// Log-density of `N(mean, variance)` at a scalar point.
pub fn normal_log_pdf(x: f64, mean: f64, variance: f64) -> f64 {
    let d = x - mean;
    -HALF_LOG_2PI - 0.5 * variance.ln() - 0.5 * d * d / variance
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn g1(mean: f64, var: f64) -> DiagGaussian {
        DiagGaussian::from_variance(vec![mean], &[var]).unwrap()
    }

    #[test]
    fn log_density_examples() {
        let d = gaussian_log_density(&[0.0], &DiagGaussian::standard(1)).unwrap();
        assert_abs_diff_eq!(d, -0.918_938_5, epsilon = 1e-7);
        let d = gaussian_log_density(&[0.0, 0.0], &DiagGaussian::standard(2)).unwrap();
        assert_abs_diff_eq!(d, -1.837_877_1, epsilon = 1e-7);
        let d = gaussian_log_density(&[1.0], &g1(0.0, 0.04)).unwrap();
        assert_abs_diff_eq!(d, -11.809_500_6, epsilon = 1e-7);
        assert_abs_diff_eq!(HALF_LOG_2PI, 0.5 * (2.0 * PI).ln(), epsilon = 1e-15);
    }

    #[test]
    fn log_density_dimension_mismatch() {
        let err = gaussian_log_density(&[0.0, 1.0], &DiagGaussian::standard(1));
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn kl_gaussian_examples() {
        let n01 = g1(0.0, 1.0);
        assert_eq!(kl_gaussian_diag(&n01, &n01).unwrap(), 0.0);
        assert_abs_diff_eq!(kl_gaussian_diag(&g1(1.0, 1.0), &n01).unwrap(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(
            kl_gaussian_diag(&n01, &g1(0.0, 4.0)).unwrap(),
            0.318_147_2,
            epsilon = 1e-7
        );
        assert!(kl_gaussian_diag(&n01, &DiagGaussian::standard(2)).is_err());
    }

    #[test]
    fn kl_categorical_examples() {
        let u10 = CategoricalDist::uniform(10);
        assert_abs_diff_eq!(kl_categorical(&u10, &u10).unwrap(), 0.0, epsilon = 1e-15);
        let one_hot = CategoricalDist::one_hot(10, 4);
        assert_abs_diff_eq!(
            kl_categorical(&one_hot, &u10).unwrap(),
            10f64.ln(),
            epsilon = 1e-12
        );
        let q = CategoricalDist::new(vec![0.5, 0.25, 0.25]).unwrap();
        assert_abs_diff_eq!(
            kl_categorical(&q, &CategoricalDist::uniform(3)).unwrap(),
            0.058_891_5,
            epsilon = 1e-7
        );
    }

    #[test]
    fn kl_categorical_zero_support() {
        let q = CategoricalDist::new(vec![0.5, 0.5]).unwrap();
        let p = CategoricalDist::one_hot(2, 0);
        assert!(matches!(
            kl_categorical(&q, &p),
            Err(Error::InfiniteDivergence { index: 1, .. })
        ));
        // q = 0 where p = 0 is fine
        assert_eq!(kl_categorical(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn categorical_validation() {
        assert!(CategoricalDist::new(vec![0.5, 0.6]).is_err());
        assert!(CategoricalDist::new(vec![-0.1, 1.1]).is_err());
        assert!(CategoricalDist::new(vec![]).is_err());
        assert_abs_diff_eq!(CategoricalDist::uniform(10).entropy(), 10f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn product_examples() {
        let single = product_of_diag_gaussians(&[g1(3.0, 0.7)]).unwrap();
        assert_abs_diff_eq!(single.mean()[0], 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(single.variance()[0], 0.7, epsilon = 1e-15);

        let two = product_of_diag_gaussians(&[g1(0.0, 1.0), g1(2.0, 1.0)]).unwrap();
        assert_abs_diff_eq!(two.mean()[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(two.variance()[0], 0.5, epsilon = 1e-15);

        let skew = product_of_diag_gaussians(&[g1(0.0, 1.0), g1(1.0, 0.25)]).unwrap();
        assert_abs_diff_eq!(skew.mean()[0], 0.8, epsilon = 1e-14);
        assert_abs_diff_eq!(skew.variance()[0], 0.2, epsilon = 1e-14);

        assert!(product_of_diag_gaussians(&[]).is_err());
    }

    #[test]
    fn log_var_is_clamped() {
        let g = DiagGaussian::new(vec![0.0, 0.0], vec![-50.0, 50.0]).unwrap();
        assert_eq!(g.log_var(), &[LOG_VAR_MIN, LOG_VAR_MAX]);
        assert!(DiagGaussian::new(vec![0.0], vec![f64::NAN]).is_err());
    }

    #[test]
    fn reparameterize_near_deterministic() {
        let g = DiagGaussian::new(vec![2.0; 1000], vec![-1e9; 1000]).unwrap();
        let mut rng = RngStream::new(3);
        let x = reparameterize(&g, &mut rng);
        assert!(x.iter().all(|v| (v - 2.0).abs() < 0.03));
    }

    #[test]
    fn reparameterize_is_seeded() {
        let g = DiagGaussian::standard(5);
        let a = reparameterize(&g, &mut RngStream::new(11));
        let b = reparameterize(&g, &mut RngStream::new(11));
        assert_eq!(a, b);
    }

    #[test]
    fn reparameterize_sample_mean() {
        let g = DiagGaussian::standard(1);
        let mut rng = RngStream::new(5);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| reparameterize(&g, &mut rng)[0]).sum::<f64>() / n as f64;
        assert!(mean.abs() <= 0.013, "sample mean {mean}");
    }

    #[test]
    fn categorical_sampling() {
        let mut rng = RngStream::new(9);
        let hot = CategoricalDist::one_hot(10, 3);
        assert!((0..1000).all(|_| sample_categorical(&hot, &mut rng) == 3));
        let first = CategoricalDist::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert!((0..1000).all(|_| sample_categorical(&first, &mut rng) == 0));

        let uniform = CategoricalDist::uniform(10);
        let n = 100_000;
        let mut counts = [0usize; 10];
        for _ in 0..n {
            counts[sample_categorical(&uniform, &mut rng)] += 1;
        }
        for c in counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 0.1).abs() <= 0.004, "frequency {freq}");
        }
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let values = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(values), 2.0);
    }
}
