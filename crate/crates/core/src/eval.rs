//! Evaluation protocols: latent interpolation grids, cross-domain β
//! interpolation, batch-posterior embeddings with a PCA projection, and a
//! logistic-regression probe over β.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;

use crate::data::{to_byte, Dataset, GroupBatch};
use crate::error::{Error, Result};
use crate::generative::{decode_means, prior_z_given};
use crate::inference::{encode_z, infer_group_with_noise, GroupNoise};
use crate::nets::NetworkBundle;
use crate::numerics::{reparameterize, DiagGaussian};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq)]
pub struct GridEndpoints {
    pub beta_start: Vec<f64>,
    pub beta_end: Vec<f64>,
    /// z endpoints of the first row.
    pub z_start: Vec<f64>,
    pub z_end: Vec<f64>,
}

/// Decoder means laid out row-major: rows vary β, columns vary z.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationGrid {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<Vec<f64>>,
    pub image_shape: (usize, usize),
    pub component: Option<usize>,
    pub endpoints: GridEndpoints,
}

impl InterpolationGrid {
    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        &self.images[row * self.cols + col]
    }
}

fn lerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + (y - x) * t).collect()
}

fn fraction(i: usize, steps: usize) -> f64 {
    i as f64 / (steps - 1) as f64
}

/// Samples from one mixture component: rows walk β diagonally from `−1` to
/// `+1`; within a row z walks diagonally from `μ_z − 3` to `μ_z + 3`, where
/// `μ_z` is the component's prior mean at that β.
pub fn sample_grid(
    bundle: &NetworkBundle,
    k: usize,
    steps_beta: usize,
    steps_z: usize,
    image_shape: (usize, usize),
) -> Result<InterpolationGrid> {
    if k >= bundle.k() {
        return Err(Error::contract(format!("component {k} out of range for K = {}", bundle.k())));
    }
    if steps_beta < 2 || steps_z < 2 {
        return Err(Error::contract("interpolation needs at least 2 steps per axis"));
    }
    let g = bundle.dims.g_global;
    let d = bundle.dims.d_local;
    let beta_start = vec![-1.0; g];
    let beta_end = vec![1.0; g];
    let mut images = Vec::with_capacity(steps_beta * steps_z);
    let mut first_row_z = None;
    for r in 0..steps_beta {
        let beta = lerp(&beta_start, &beta_end, fraction(r, steps_beta));
        let mu = prior_z_given(k, &beta, bundle)?.mean().to_vec();
        let z_start: Vec<f64> = mu.iter().map(|m| m - 3.0).collect();
        let z_end: Vec<f64> = mu.iter().map(|m| m + 3.0).collect();
        let z = Array2::from_shape_fn((steps_z, d), |(c, j)| {
            z_start[j] + (z_end[j] - z_start[j]) * fraction(c, steps_z)
        });
        let means = decode_means(&z, &beta, bundle)?;
        images.extend(means.rows().into_iter().map(|r| r.to_vec()));
        first_row_z.get_or_insert((z_start, z_end));
    }
    let (z_start, z_end) = first_row_z.expect("at least two rows");
    Ok(InterpolationGrid {
        rows: steps_beta,
        cols: steps_z,
        images,
        image_shape,
        component: Some(k),
        endpoints: GridEndpoints {
            beta_start,
            beta_end,
            z_start,
            z_end,
        },
    })
}

/// Posterior of a group at zero reparameterisation noise (z at its posterior mean).
pub fn group_beta_posterior(bundle: &NetworkBundle, x: &Array2<f64>) -> Result<DiagGaussian> {
    let d = bundle.dims;
    let noise = GroupNoise::zeros(x.nrows(), d.d_local, d.g_global);
    Ok(infer_group_with_noise(x, bundle, &noise)?.qbeta)
}

/// Interpolates β between the posteriors of two groups (rows) and z between
/// the local posterior means of one member of each (columns). The discrete
/// component plays no part.
pub fn cross_interpolation(
    bundle: &NetworkBundle,
    batch_a: &Array2<f64>,
    batch_b: &Array2<f64>,
    a: usize,
    b: usize,
    steps: usize,
    image_shape: (usize, usize),
) -> Result<InterpolationGrid> {
    if batch_a.nrows() == 0 || batch_b.nrows() == 0 {
        return Err(Error::contract("interpolation batches must be non-empty"));
    }
    if a >= batch_a.nrows() || b >= batch_b.nrows() {
        return Err(Error::contract("sample index outside its batch"));
    }
    if steps < 2 {
        return Err(Error::contract("interpolation needs at least 2 steps"));
    }
    let beta_start = group_beta_posterior(bundle, batch_a)?.mean().to_vec();
    let beta_end = group_beta_posterior(bundle, batch_b)?.mean().to_vec();
    let z_start = encode_z(&batch_a.row(a).to_vec(), bundle)?.mean().to_vec();
    let z_end = encode_z(&batch_b.row(b).to_vec(), bundle)?.mean().to_vec();
    let d = bundle.dims.d_local;
    let z = Array2::from_shape_fn((steps, d), |(c, j)| {
        z_start[j] + (z_end[j] - z_start[j]) * fraction(c, steps)
    });
    let mut images = Vec::with_capacity(steps * steps);
    for r in 0..steps {
        let beta = lerp(&beta_start, &beta_end, fraction(r, steps));
        let means = decode_means(&z, &beta, bundle)?;
        images.extend(means.rows().into_iter().map(|r| r.to_vec()));
    }
    Ok(InterpolationGrid {
        rows: steps,
        cols: steps,
        images,
        image_shape,
        component: None,
        endpoints: GridEndpoints {
            beta_start,
            beta_end,
            z_start,
            z_end,
        },
    })
}

// ---------------------------------------------------------------------------
// Embeddings

/// Rank-2 principal-component projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-norm axes in descending eigenvalue order; the largest-magnitude
    /// entry of each axis is positive.
    pub axes: [Vec<f64>; 2],
    pub eigenvalues: [f64; 2],
}

impl Pca {
    pub fn fit(points: &[Vec<f64>]) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::Rank {
                needed: 3,
                got: points.len(),
            });
        }
        let dim = points[0].len();
        if dim < 2 || points.iter().any(|p| p.len() != dim) {
            return Err(Error::contract("PCA needs points of one common dimension >= 2"));
        }
        let n = points.len() as f64;
        let mean: Vec<f64> = (0..dim).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n).collect();
        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        for p in points {
            for i in 0..dim {
                for j in 0..dim {
                    cov[(i, j)] += (p[i] - mean[i]) * (p[j] - mean[j]);
                }
            }
        }
        cov /= n - 1.0;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let axis = |idx: usize| -> Vec<f64> {
            let col: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
            let pivot = col
                .iter()
                .copied()
                .fold(0.0_f64, |m, v| if v.abs() > m.abs() { v } else { m });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            col.into_iter().map(|v| v * sign).collect()
        };
        Ok(Self {
            mean,
            axes: [axis(order[0]), axis(order[1])],
            eigenvalues: [eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]],
        })
    }

    pub fn project(&self, p: &[f64]) -> [f64; 2] {
        let centred: Vec<f64> = p.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let dot = |axis: &[f64]| centred.iter().zip(axis).map(|(a, b)| a * b).sum::<f64>();
        [dot(&self.axes[0]), dot(&self.axes[1])]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchEmbedding {
    pub tag: String,
    pub beta_mean: Vec<f64>,
    pub coords: [f64; 2],
}

/// Posterior mean of β for each batch, projected on the pooled PCA plane.
pub fn embed_batches(
    bundle: &NetworkBundle,
    data: &Dataset,
    batches: &[GroupBatch],
) -> Result<(Vec<BatchEmbedding>, Pca)> {
    let means = batches
        .iter()
        .map(|b| Ok(group_beta_posterior(bundle, &b.x(data))?.mean().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let pca = Pca::fit(&means)?;
    let out = batches
        .iter()
        .zip(means)
        .map(|(b, m)| BatchEmbedding {
            tag: b.tag.clone(),
            coords: pca.project(&m),
            beta_mean: m,
        })
        .collect();
    Ok((out, pca))
}

/// `per_batch` reparameterised β draws from each batch's posterior.
pub fn posterior_samples(
    bundle: &NetworkBundle,
    data: &Dataset,
    batches: &[GroupBatch],
    per_batch: usize,
    rng: &mut RngStream,
) -> Result<Vec<LabeledPoint>> {
    let mut out = Vec::with_capacity(batches.len() * per_batch);
    for b in batches {
        let q = group_beta_posterior(bundle, &b.x(data))?;
        for _ in 0..per_batch {
            out.push(LabeledPoint {
                tag: b.tag.clone(),
                features: reparameterize(&q, rng),
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Linear probe

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPoint {
    pub tag: String,
    pub features: Vec<f64>,
}

impl From<&BatchEmbedding> for LabeledPoint {
    fn from(e: &BatchEmbedding) -> Self {
        Self {
            tag: e.tag.clone(),
            features: e.beta_mean.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            iterations: 500,
            l2: 1e-4,
        }
    }
}

/// Multinomial logistic regression on standardised features, trained by
/// full-batch gradient descent from zero weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticProbe {
    pub classes: Vec<String>,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    /// `classes × features`.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LogisticProbe {
    pub fn fit(train: &[LabeledPoint], config: ProbeConfig) -> Result<Self> {
        let mut classes: Vec<String> = train.iter().map(|p| p.tag.clone()).collect();
        classes.sort();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::contract("the probe needs at least two classes"));
        }
        let dim = train[0].features.len();
        if train.iter().any(|p| p.features.len() != dim) {
            return Err(Error::contract("probe features have inconsistent widths"));
        }
        let n = train.len() as f64;
        let feature_mean: Vec<f64> = (0..dim)
            .map(|j| train.iter().map(|p| p.features[j]).sum::<f64>() / n)
            .collect();
        let feature_scale: Vec<f64> = (0..dim)
            .map(|j| {
                let var = train.iter().map(|p| (p.features[j] - feature_mean[j]).powi(2)).sum::<f64>() / n;
                if var > 1e-24 { var.sqrt() } else { 1.0 }
            })
            .collect();
        let mut probe = Self {
            weights: vec![vec![0.0; dim]; classes.len()],
            bias: vec![0.0; classes.len()],
            classes,
            feature_mean,
            feature_scale,
        };
        let xs: Vec<Vec<f64>> = train.iter().map(|p| probe.standardise(&p.features)).collect();
        let ys: Vec<usize> = train
            .iter()
            .map(|p| probe.classes.binary_search(&p.tag).expect("class from train set"))
            .collect();
        let c = probe.classes.len();
        for _ in 0..config.iterations {
            let mut gw = vec![vec![0.0; dim]; c];
            let mut gb = vec![0.0; c];
            for (x, &y) in xs.iter().zip(&ys) {
                let p = probe.probabilities_std(x);
                for k in 0..c {
                    let err = p[k] - if k == y { 1.0 } else { 0.0 };
                    gb[k] += err;
                    for j in 0..dim {
                        gw[k][j] += err * x[j];
                    }
                }
            }
            for k in 0..c {
                probe.bias[k] -= config.learning_rate * gb[k] / n;
                for j in 0..dim {
                    let grad = gw[k][j] / n + config.l2 * probe.weights[k][j];
                    probe.weights[k][j] -= config.learning_rate * grad;
                }
            }
        }
        Ok(probe)
    }

    fn standardise(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.feature_mean)
            .zip(&self.feature_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn probabilities_std(&self, x: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        exp.into_iter().map(|e| e / total).collect()
    }

    pub fn predict(&self, features: &[f64]) -> &str {
        let p = self.probabilities_std(&self.standardise(features));
        let best = (0..p.len()).fold(0, |b, k| if p[k] > p[b] { k } else { b });
        &self.classes[best]
    }

    /// Fraction of points whose predicted class equals their tag.
    pub fn accuracy(&self, points: &[LabeledPoint]) -> f64 {
        if points.is_empty() {
            return 0.0;
        }
        let hits = points.iter().filter(|p| self.predict(&p.features) == p.tag).count();
        hits as f64 / points.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub classes: Vec<String>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub train_count: usize,
    pub test_count: usize,
}

impl ProbeReport {
    /// Plain-text table: one header line and one row for the linear probe.
    pub fn table(&self) -> String {
        format!(
            "classifier\ttrain_acc\ttest_acc\tclasses\n\
             linear-probe\t{:.4}\t{:.4}\t{}\n",
            self.train_accuracy,
            self.test_accuracy,
            self.classes.join(" vs ")
        )
    }
}

pub fn classify_embeddings(train: &[LabeledPoint], test: &[LabeledPoint], config: ProbeConfig) -> Result<ProbeReport> {
    let probe = LogisticProbe::fit(train, config)?;
    Ok(ProbeReport {
        train_accuracy: probe.accuracy(train),
        test_accuracy: probe.accuracy(test),
        classes: probe.classes,
        train_count: train.len(),
        test_count: test.len(),
    })
}

// ---------------------------------------------------------------------------
// Writers

const SEPARATOR: u8 = 255;

/// Binary PGM of the whole grid with 1-pixel separators between tiles.
pub fn encode_pgm_grid(grid: &InterpolationGrid) -> Vec<u8> {
    let (h, w) = grid.image_shape;
    let width = grid.cols * w + grid.cols.saturating_sub(1);
    let height = grid.rows * h + grid.rows.saturating_sub(1);
    let mut pixels = vec![SEPARATOR; width * height];
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let img = grid.cell(r, c);
            for y in 0..h {
                for x in 0..w {
                    let py = r * (h + 1) + y;
                    let px = c * (w + 1) + x;
                    pixels[py * width + px] = to_byte(img[y * w + x]);
                }
            }
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels);
    out
}

pub fn write_pgm_grid(grid: &InterpolationGrid, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm_grid(grid)).map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Columns `tag,pc1,pc2,b0..b{g-1}`, one row per batch.
pub fn write_embeddings_csv(embeddings: &[BatchEmbedding], path: &Path) -> Result<()> {
    let g = embeddings.first().map(|e| e.beta_mean.len()).unwrap_or(0);
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["tag".to_string(), "pc1".into(), "pc2".into()];
    header.extend((0..g).map(|j| format!("b{j}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for e in embeddings {
        let mut rec = vec![e.tag.clone(), e.coords[0].to_string(), e.coords[1].to_string()];
        rec.extend(e.beta_mean.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads an embedding CSV back; features are the raw `b*` columns.
pub fn read_embeddings_csv(path: &Path) -> Result<Vec<LabeledPoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.get(0) != Some("tag") {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: "first column must be 'tag'".into(),
        });
    }
    let beta_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with('b') && h[1..].parse::<usize>().is_ok())
        .map(|(i, _)| i)
        .collect();
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let features = beta_cols
            .iter()
            .map(|&i| {
                rec.get(i).unwrap_or("").parse::<f64>().map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    message: format!("column {i}: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(LabeledPoint {
            tag: rec.get(0).unwrap_or("").to_string(),
            features,
        });
    }
    Ok(out)
}
