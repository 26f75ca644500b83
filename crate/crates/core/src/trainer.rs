//! Stochastic variational training over random groups, with binary
//! checkpoints and a CSV metrics log.
//!
//! All randomness is keyed by `(seed, purpose, index)`: the epoch shuffle by
//! epoch number, the reparameterisation noise by global step. Parameters and
//! optimizer moments are kept at single precision after every update, so a
//! float32 checkpoint captures the training state exactly and resuming from
//! it reproduces an uninterrupted run bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{random_groups, Dataset, GroupBatch};
use crate::error::{Error, Result};
use crate::generative::{GenerativeConfig, DEFAULT_SIGMA_X};
use crate::inference::GroupNoise;
use crate::nets::{init_bundle, ModelDims, NetworkBundle};
use crate::objective::{group_elbo_with_noise, loss};
use crate::optim::{round_params_to_f32, Adam, AdamConfig};
use crate::rng::{Purpose, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub group_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub data_dim: usize,
    pub d_local: usize,
    pub g_global: usize,
    pub k: usize,
    pub hidden: usize,
    pub sigma_x: f64,
    /// Steps between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub image_rows: usize,
    pub image_cols: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            group_size: 128,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 100.0,
            seed: 0,
            data_dim: 784,
            d_local: 10,
            g_global: 20,
            k: 10,
            hidden: ModelDims::DEFAULT_HIDDEN,
            sigma_x: DEFAULT_SIGMA_X,
            checkpoint_every: 0,
            image_rows: 28,
            image_cols: 28,
        }
    }
}

impl TrainConfig {
    pub fn dims(&self) -> ModelDims {
        ModelDims::new(self.data_dim, self.d_local, self.g_global, self.k).with_hidden(self.hidden)
    }

    pub fn generative(&self) -> Result<GenerativeConfig> {
        GenerativeConfig::new(self.dims(), self.sigma_x, self.group_size)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 {
            return Err(Error::contract("group size must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::contract("learning rate must be positive"));
        }
        if self.image_rows * self.image_cols != self.data_dim {
            return Err(Error::contract(format!(
                "image shape {}x{} does not match data dimension {}",
                self.image_rows, self.image_cols, self.data_dim
            )));
        }
        self.generative().map(|_| ())
    }

    /// Copies data dimension and image shape from a dataset.
    pub fn fit_to(&mut self, data: &Dataset) {
        self.data_dim = data.dim();
        self.image_rows = data.image_shape.0;
        self.image_cols = data.image_shape.1;
    }
}

/// One logged optimisation step; ELBO terms are per sample (group totals / B).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub elbo: f64,
    pub recon: f64,
    pub kl_z: f64,
    pub kl_d: f64,
    pub kl_beta: f64,
}

pub const METRICS_HEADER: &str = "step,epoch,elbo,recon,kl_z,kl_d,kl_beta";

pub fn metrics_csv(metrics: &[StepMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            m.step, m.epoch, m.elbo, m.recon, m.kl_z, m.kl_d, m.kl_beta
        )
        .expect("write to string");
    }
    out
}

/// Model, optimizer and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub bundle: NetworkBundle,
    pub adam: Adam,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<StepMetrics>,
    /// Mean per-sample ELBO of the first epoch's groups at the initial
    /// parameters, when training started from step 0.
    pub initial_elbo: Option<f64>,
    /// Mean per-sample ELBO over each completed epoch's steps.
    pub epoch_means: Vec<f64>,
}

impl TrainOutcome {
    pub fn final_epoch_mean(&self) -> Option<f64> {
        self.epoch_means.last().copied()
    }
}

fn noise_for_step(config: &TrainConfig, step: u64) -> GroupNoise {
    let mut z_rng = RngStream::substream(config.seed, Purpose::NoiseZ, step);
    let mut b_rng = RngStream::substream(config.seed, Purpose::NoiseBeta, step);
    GroupNoise::draw(config.group_size, config.d_local, config.g_global, &mut z_rng, &mut b_rng)
}

/// The random groups of one epoch.
pub fn epoch_groups(data: &Dataset, config: &TrainConfig, epoch: usize) -> Result<Vec<GroupBatch>> {
    let mut rng = RngStream::substream(config.seed, Purpose::Shuffle, epoch as u64);
    random_groups(data, config.group_size, &mut rng)
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut bundle = init_bundle(config.dims(), config.seed)?;
        round_params_to_f32(&mut bundle.params);
        let adam = Adam::new(config.adam(), &bundle.params)?;
        Ok(Self {
            config,
            bundle,
            adam,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    /// Mean per-sample ELBO over the first epoch's groups, without updating.
    pub fn evaluate_first_epoch(&self, data: &Dataset) -> Result<f64> {
        let gen = self.config.generative()?;
        let groups = epoch_groups(data, &self.config, 0)?;
        let mut total = 0.0;
        for (i, g) in groups.iter().enumerate() {
            let noise = noise_for_step(&self.config, i as u64);
            let e = group_elbo_with_noise(&g.x(data), &self.bundle, &gen, &noise)?;
            total += e.elbo / g.len() as f64;
        }
        Ok(total / groups.len() as f64)
    }

    /// One update on the group `x` using the noise of the current step.
    pub fn step_on(&mut self, x: &Array2<f64>, epoch: usize) -> Result<StepMetrics> {
        let gen = self.config.generative()?;
        let step = self.adam.step;
        let noise = noise_for_step(&self.config, step);
        let mut graph = loss(x, &self.bundle, &gen, &noise).map_err(|e| match e {
            Error::Divergence { breakdown, .. } => Error::Divergence { step, breakdown },
            other => other,
        })?;
        let grads = graph.tape.backward(graph.loss)?;
        self.bundle.params.zero_grad();
        self.bundle.params.accumulate(&grads);
        self.adam.step(&mut self.bundle.params);
        round_params_to_f32(&mut self.bundle.params);
        self.adam.round_to_f32();
        if !self.bundle.params.all_finite() {
            return Err(Error::Divergence {
                step,
                breakdown: Box::new(graph.breakdown),
            });
        }
        let b = graph.breakdown.group_size() as f64;
        let e = &graph.breakdown;
        Ok(StepMetrics {
            step,
            epoch,
            elbo: e.elbo / b,
            recon: e.recon / b,
            kl_z: e.kl_z / b,
            kl_d: e.kl_d / b,
            kl_beta: e.kl_beta / b,
        })
    }

    /// Trains until `config.epochs` epochs are complete, resuming mid-run if
    /// the step counter is non-zero. Periodic checkpoints go to
    /// `checkpoint_dir/step-<n>.ckpt`; on divergence the last good state is
    /// written to `checkpoint_dir/last-good.ckpt` before the error returns.
    pub fn train(&mut self, data: &Dataset, checkpoint_dir: Option<&Path>) -> Result<TrainOutcome> {
        if data.dim() != self.config.data_dim {
            return Err(Error::contract(format!(
                "dataset dimension {} but model expects {}",
                data.dim(),
                self.config.data_dim
            )));
        }
        if data.len() < self.config.group_size {
            return Err(Error::Capacity {
                needed: self.config.group_size,
                available: data.len(),
            });
        }
        let per_epoch = (data.len() / self.config.group_size) as u64;
        let total = per_epoch * self.config.epochs as u64;
        let initial_elbo = if self.adam.step == 0 {
            Some(self.evaluate_first_epoch(data)?)
        } else {
            None
        };

        let mut metrics = Vec::new();
        let mut epoch_means = Vec::new();
        let mut current: Option<(usize, Vec<GroupBatch>)> = None;
        let mut epoch_sum = 0.0;
        let mut epoch_steps = 0usize;
        while self.adam.step < total {
            let step = self.adam.step;
            let epoch = (step / per_epoch) as usize;
            let pos = (step % per_epoch) as usize;
            if current.as_ref().map(|(e, _)| *e) != Some(epoch) {
                current = Some((epoch, epoch_groups(data, &self.config, epoch)?));
            }
            let x = current.as_ref().expect("groups for epoch").1[pos].x(data);
            let before = checkpoint_dir.map(|_| self.checkpoint());
            let m = match self.step_on(&x, epoch) {
                Ok(m) => m,
                Err(e) => {
                    if let (Some(dir), Some(ckpt)) = (checkpoint_dir, before) {
                        save_checkpoint(&dir.join("last-good.ckpt"), &ckpt)?;
                    }
                    return Err(e);
                }
            };
            epoch_sum += m.elbo;
            epoch_steps += 1;
            metrics.push(m);
            if self.adam.step % per_epoch == 0 {
                epoch_means.push(epoch_sum / epoch_steps as f64);
                epoch_sum = 0.0;
                epoch_steps = 0;
            }
            if let Some(dir) = checkpoint_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && self.adam.step % every == 0 {
                    save_checkpoint(&dir.join(format!("step-{}.ckpt", self.adam.step)), &self.checkpoint())?;
                }
            }
        }
        Ok(TrainOutcome {
            checkpoint: self.checkpoint(),
            metrics,
            initial_elbo,
            epoch_means,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::with_capacity(self.bundle.params.len() * 3);
        for t in self.bundle.params.iter() {
            tensors.push(NamedTensor::from_matrix(&t.name, &t.shape, &t.values));
        }
        for (i, t) in self.bundle.params.iter().enumerate() {
            tensors.push(NamedTensor::from_matrix(&format!("{}.m1", t.name), &t.shape, &self.adam.m1[i]));
            tensors.push(NamedTensor::from_matrix(&format!("{}.m2", t.name), &t.shape, &self.adam.m2[i]));
        }
        Checkpoint {
            tensors,
            step: self.adam.step,
            config: Some(self.config.clone()),
        }
    }

    /// Rebuilds the trainer from a checkpoint carrying its config echo.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ckpt
            .config
            .clone()
            .ok_or_else(|| Error::contract("checkpoint has no config sidecar"))?;
        let mut trainer = Self::new(config)?;
        let lookup = |name: &str| -> Result<&NamedTensor> {
            ckpt.tensor(name)
                .ok_or_else(|| Error::format(0, format!("checkpoint is missing tensor '{name}'")))
        };
        for i in 0..trainer.bundle.params.len() {
            let name = trainer.bundle.params.tensor(i).name.clone();
            let dim = trainer.bundle.params.tensor(i).values.dim();
            trainer.bundle.params.tensor_mut(i).values = lookup(&name)?.to_matrix(dim)?;
            trainer.adam.m1[i] = lookup(&format!("{name}.m1"))?.to_matrix(dim)?;
            trainer.adam.m2[i] = lookup(&format!("{name}.m2"))?.to_matrix(dim)?;
        }
        trainer.adam.step = ckpt.step;
        Ok(trainer)
    }
}

/// Trains a fresh model on `data` with `config`.
pub fn train(data: &Dataset, config: TrainConfig, checkpoint_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config)?;
    trainer.train(data, checkpoint_dir)
}

/// Restores just the network bundle (no optimizer) from a checkpoint.
pub fn bundle_from_checkpoint(ckpt: &Checkpoint) -> Result<(TrainConfig, NetworkBundle)> {
    let t = Trainer::from_checkpoint(ckpt)?;
    Ok((t.config, t.bundle))
}

// ---------------------------------------------------------------------------
// Checkpoint format

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UGVAE001";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<u32>,
    pub values: Vec<f32>,
}

impl NamedTensor {
    fn from_matrix(name: &str, shape: &[usize], m: &Array2<f64>) -> Self {
        Self {
            name: name.to_string(),
            shape: shape.iter().map(|&s| s as u32).collect(),
            values: m.iter().map(|&v| v as f32).collect(),
        }
    }

    fn to_matrix(&self, dim: (usize, usize)) -> Result<Array2<f64>> {
        if self.values.len() != dim.0 * dim.1 {
            return Err(Error::format(
                0,
                format!("tensor '{}' has {} values, expected {}", self.name, self.values.len(), dim.0 * dim.1),
            ));
        }
        Ok(Array2::from_shape_vec(dim, self.values.iter().map(|&v| v as f64).collect()).expect("checked length"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    pub step: u64,
    /// Stored in the `<path>.json` sidecar, not in the binary file.
    pub config: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Binary layout: magic, `u32` tensor count, per tensor `u32` name length,
    /// UTF-8 name, `u32` rank, `u32` dims, `f32` values; trailing `u64` step.
    /// All integers and floats little-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if &magic[..5] != b"UGVAE" {
            return Err(Error::format(0, "bad magic: not a checkpoint file"));
        }
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(
                5,
                format!(
                    "unsupported checkpoint version '{}'",
                    String::from_utf8_lossy(&magic[5..])
                ),
            ));
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::format(at as u64, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32("rank")?;
            let shape = (0..rank).map(|_| r.u32("dimension")).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().map(|&d| d as usize).product();
            let raw = r.take(n * 4, "tensor values")?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(NamedTensor { name, shape, values });
        }
        let step = u64::from_le_bytes(r.take(8, "step counter")?.try_into().expect("8 bytes"));
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes after step counter"));
        }
        Ok(Self {
            tensors,
            step,
            config: None,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.pos as u64, format!("truncated while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.encode()).map_err(|e| Error::io(path, e))?;
    if let Some(cfg) = &ckpt.config {
        let side = sidecar_path(path);
        let mut json = serde_json::to_string_pretty(cfg).expect("config serialises");
        json.push('\n');
        fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut ckpt = Checkpoint::decode(&bytes)?;
    let side = sidecar_path(path);
    if side.exists() {
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        ckpt.config = Some(serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: side.clone(),
            message: e.to_string(),
        })?);
    }
    Ok(ckpt)
}
