//! Command-line front end. `run` parses arguments and returns the process
//! exit code: 0 success, 1 usage error, 2 data or format error, 3 training
//! divergence.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{
    encode_idx_images, encode_idx_labels, load_idx, make_synthetic, random_groups, structured_groups, write_bytes,
    Dataset, GroupBatch, LabelSet, SyntheticConfig, STYLE_COUNT,
};
use crate::error::{Error, Result};
use crate::eval::{
    classify_embeddings, cross_interpolation, embed_batches, read_embeddings_csv, sample_grid, write_embeddings_csv,
    write_pgm_grid, InterpolationGrid, ProbeConfig,
};
use crate::nets::NetworkBundle;
use crate::rng::{Purpose, RngStream};
use crate::trainer::{bundle_from_checkpoint, load_checkpoint, metrics_csv, save_checkpoint, TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

pub const THREADS_ENV: &str = "UGVAE_THREADS";
pub const MNIST_DIR_ENV: &str = "UGVAE_MNIST_DIR";

#[derive(Debug, Parser)]
#[command(name = "ugvae", version, about = "Unsupervised global VAE: training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes final.ckpt (+ .json sidecar) and metrics.csv.
    Train(TrainArgs),
    /// Render a β × z sample grid (PGM) for each mixture component.
    SampleGrid(SampleGridArgs),
    /// Interpolate between the posteriors of two batches (PGM).
    Interpolate(InterpolateArgs),
    /// Embed structured batches by their β posterior means (CSV).
    Embed(EmbedArgs),
    /// Train the linear probe on one embedding CSV and test on another.
    Classify(ClassifyArgs),
    /// Write the synthetic group-structured dataset as IDX files.
    Synth(SynthArgs),
}

/// Dataset selection shared by several commands.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// `mnist`, `synthetic`, `synthetic-style` (labels = style) or a path to
    /// an IDX image file.
    #[arg(long)]
    pub data: String,
    /// IDX label file accompanying an explicit image path.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Seed of the synthetic generator.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// Number of groups drawn by the synthetic generator.
    #[arg(long, default_value_t = 50)]
    pub synth_groups: usize,
    /// Members per synthetic group.
    #[arg(long, default_value_t = 100)]
    pub synth_group_size: usize,
    /// Keep only the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// JSON file with any subset of the training config; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from this checkpoint (its sidecar config is the base).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "K")]
    pub k: Option<usize>,
    #[arg(long = "d")]
    pub d_local: Option<usize>,
    #[arg(long = "g")]
    pub g_global: Option<usize>,
    #[arg(long = "B")]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Global gradient-norm clip; 0 disables clipping.
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub sigma_x: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SampleGridArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Single component; all components when omitted.
    #[arg(long)]
    pub component: Option<usize>,
    #[arg(long, default_value_t = 7)]
    pub steps: usize,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset of the first batch.
    #[arg(long)]
    pub data_a: String,
    /// Dataset of the second batch; defaults to the first.
    #[arg(long)]
    pub data_b: Option<String>,
    /// Label set restricting the first batch (e.g. `even`, `style:0`).
    #[arg(long)]
    pub set_a: Option<String>,
    #[arg(long)]
    pub set_b: Option<String>,
    /// Member of batch A whose local code starts the z axis.
    #[arg(long, default_value_t = 0)]
    pub index_a: usize,
    #[arg(long, default_value_t = 0)]
    pub index_b: usize,
    #[arg(long, default_value_t = 7)]
    pub steps: usize,
    /// Batch size; defaults to the checkpoint's group size.
    #[arg(long = "B")]
    pub group_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Comma-separated label sets, one batch family per set.
    #[arg(long, value_delimiter = ',', default_value = "even,odd")]
    pub sets: Vec<String>,
    #[arg(long, default_value_t = 50)]
    pub batches_per_set: usize,
    /// Batch size; defaults to the checkpoint's group size.
    #[arg(long = "B")]
    pub group_size: Option<usize>,
    /// Restrict sampling to rows `start:end` of the dataset.
    #[arg(long)]
    pub range: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub groups: usize,
    #[arg(long, default_value_t = 100)]
    pub group_size: usize,
    #[arg(long, default_value_t = 4)]
    pub k_true: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Failure of a command, already classified by exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Contract(_) => EXIT_USAGE,
            Error::Divergence { .. } => EXIT_DIVERGED,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

/// Parses `UGVAE_THREADS`; `None` when unset.
pub fn thread_cap(value: Option<&str>) -> std::result::Result<Option<usize>, String> {
    match value {
        None => Ok(None),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(format!("{THREADS_ENV} must be a positive integer, got '{v}'")),
        },
    }
}

/// Runs the command line and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let threads = match thread_cap(std::env::var(THREADS_ENV).ok().as_deref()) {
        Ok(t) => t.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
        Err(msg) => {
            eprintln!("error: {msg}");
            return EXIT_USAGE;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::SampleGrid(a) => cmd_sample_grid(a, threads),
        Command::Interpolate(a) => cmd_interpolate(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Classify(a) => cmd_classify(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn mnist_dir() -> PathBuf {
    std::env::var_os(MNIST_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}

/// Resolves a dataset name or path.
pub fn load_dataset(args: &DataArgs) -> Result<Dataset> {
    let data = match args.data.as_str() {
        "mnist" => {
            let dir = mnist_dir();
            load_idx(
                &dir.join("train-images-idx3-ubyte"),
                Some(&dir.join("train-labels-idx1-ubyte")),
            )?
        }
        "synthetic" | "synthetic-style" => {
            let synth = make_synthetic(&SyntheticConfig {
                n_groups: args.synth_groups,
                group_size: args.synth_group_size,
                seed: args.data_seed,
                ..Default::default()
            })?;
            if args.data == "synthetic" {
                synth.dataset
            } else {
                synth.by_style()
            }
        }
        path => load_idx(Path::new(path), args.labels.as_deref())?,
    };
    Ok(match args.limit {
        Some(n) if n < data.len() => data.head(n),
        _ => data,
    })
}

fn data_args(name: &str, data_seed: u64) -> DataArgs {
    DataArgs {
        data: name.to_string(),
        labels: None,
        data_seed,
        synth_groups: 50,
        synth_group_size: 100,
        limit: None,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn train_config(a: &TrainArgs) -> std::result::Result<TrainConfig, Failure> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::from(Error::io(path, e)))?;
            serde_json::from_str::<TrainConfig>(&text).map_err(|e| {
                Failure::from(Error::Parse {
                    path: path.clone(),
                    message: e.to_string(),
                })
            })?
        }
        None => TrainConfig::default(),
    };
    macro_rules! overlay {
        ($($field:ident),*) => { $( if let Some(v) = a.$field { cfg.$field = v; } )* };
    }
    overlay!(
        epochs,
        k,
        d_local,
        g_global,
        group_size,
        hidden,
        learning_rate,
        beta1,
        beta2,
        epsilon,
        clip_norm,
        sigma_x,
        seed,
        checkpoint_every
    );
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> std::result::Result<(), Failure> {
    let data = load_dataset(&a.data)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut t = Trainer::from_checkpoint(&load_checkpoint(path)?)?;
            if let Some(e) = a.epochs {
                t.config.epochs = e;
            }
            t
        }
        None => {
            let mut cfg = train_config(&a)?;
            cfg.fit_to(&data);
            Trainer::new(cfg)?
        }
    };
    create_dir(&a.out)?;
    let outcome = trainer.train(&data, Some(&a.out));
    let outcome = outcome?;
    let ckpt_path = a.out.join("final.ckpt");
    save_checkpoint(&ckpt_path, &outcome.checkpoint)?;
    let metrics_path = a.out.join("metrics.csv");
    write_bytes(&metrics_path, metrics_csv(&outcome.metrics).as_bytes())?;
    if let Some(init) = outcome.initial_elbo {
        println!("initial elbo/sample: {init:.4}");
    }
    for (e, m) in outcome.epoch_means.iter().enumerate() {
        println!("epoch {e} mean elbo/sample: {m:.4}");
    }
    println!("checkpoint: {}", ckpt_path.display());
    println!("metrics: {}", metrics_path.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<(TrainConfig, NetworkBundle)> {
    bundle_from_checkpoint(&load_checkpoint(path)?)
}

fn cmd_sample_grid(a: SampleGridArgs, threads: usize) -> std::result::Result<(), Failure> {
    let (cfg, bundle) = load_model(&a.ckpt)?;
    let shape = (cfg.image_rows, cfg.image_cols);
    let components: Vec<usize> = match a.component {
        Some(k) => vec![k],
        None => (0..bundle.k()).collect(),
    };
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.ckpt.parent().map(Path::to_path_buf).unwrap_or_default());
    create_dir(&out)?;
    // Components render independently; each worker takes every `threads`-th one.
    let workers = threads.min(components.len()).max(1);
    let grids: Vec<Result<(usize, InterpolationGrid)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (components, bundle) = (&components, &bundle);
                s.spawn(move || {
                    components
                        .iter()
                        .skip(w)
                        .step_by(workers)
                        .map(|&k| sample_grid(bundle, k, a.steps, a.steps, shape).map(|g| (k, g)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("grid worker panicked"))
            .collect()
    });
    let mut grids = grids.into_iter().collect::<Result<Vec<_>>>()?;
    grids.sort_by_key(|(k, _)| *k);
    for (k, grid) in grids {
        let path = out.join(format!("component-{k}.pgm"));
        write_pgm_grid(&grid, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn pick_batch(
    data: &Dataset,
    set: Option<&str>,
    b: usize,
    rng: &mut RngStream,
) -> Result<GroupBatch> {
    let mut batches = match set {
        Some(spec) => structured_groups(data, &LabelSet::parse(spec)?, b, 1, rng)?,
        None => random_groups(data, b, rng)?,
    };
    Ok(batches.swap_remove(0))
}

fn cmd_interpolate(a: InterpolateArgs) -> std::result::Result<(), Failure> {
    let (cfg, bundle) = load_model(&a.ckpt)?;
    let b = a.group_size.unwrap_or(cfg.group_size);
    let data_a = load_dataset(&data_args(&a.data_a, a.data_seed))?;
    let data_b = match &a.data_b {
        Some(name) => load_dataset(&data_args(name, a.data_seed))?,
        None => data_a.clone(),
    };
    let mut rng_a = RngStream::substream(a.seed, Purpose::Batches, 0);
    let mut rng_b = RngStream::substream(a.seed, Purpose::Batches, 1);
    let batch_a = pick_batch(&data_a, a.set_a.as_deref(), b, &mut rng_a)?;
    let batch_b = pick_batch(&data_b, a.set_b.as_deref(), b, &mut rng_b)?;
    let grid = cross_interpolation(
        &bundle,
        &batch_a.x(&data_a),
        &batch_b.x(&data_b),
        a.index_a,
        a.index_b,
        a.steps,
        (cfg.image_rows, cfg.image_cols),
    )?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_pgm_grid(&grid, &a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn parse_range(spec: &str, len: usize) -> std::result::Result<(usize, usize), Failure> {
    let bad = || usage(format!("range must be 'start:end' within 0..={len}, got '{spec}'"));
    let (s, e) = spec.split_once(':').ok_or_else(bad)?;
    let start = if s.is_empty() { 0 } else { s.parse().map_err(|_| bad())? };
    let end = if e.is_empty() { len } else { e.parse().map_err(|_| bad())? };
    if start >= end || end > len {
        return Err(bad());
    }
    Ok((start, end))
}

fn cmd_embed(a: EmbedArgs) -> std::result::Result<(), Failure> {
    let (cfg, bundle) = load_model(&a.ckpt)?;
    let mut data = load_dataset(&a.data)?;
    if let Some(spec) = &a.range {
        let (start, end) = parse_range(spec, data.len())?;
        let indices: Vec<usize> = (start..end).collect();
        data = data.subset(&indices, format!("{}[{spec}]", data.name));
    }
    let b = a.group_size.unwrap_or(cfg.group_size);
    let mut batches = Vec::new();
    for (i, spec) in a.sets.iter().enumerate() {
        let set = LabelSet::parse(spec)?;
        let mut rng = RngStream::substream(a.seed, Purpose::Batches, i as u64);
        batches.extend(structured_groups(&data, &set, b, a.batches_per_set, &mut rng)?);
    }
    let (embeddings, pca) = embed_batches(&bundle, &data, &batches)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_embeddings_csv(&embeddings, &a.out)?;
    println!("note: 2-D coordinates are a PCA projection (used in place of t-SNE)");
    println!(
        "{} batches, explained variance of pc1/pc2: {:.4} / {:.4}",
        embeddings.len(),
        pca.eigenvalues[0],
        pca.eigenvalues[1]
    );
    println!("{}", a.out.display());
    Ok(())
}

fn cmd_classify(a: ClassifyArgs) -> std::result::Result<(), Failure> {
    let train = read_embeddings_csv(&a.train)?;
    let test = read_embeddings_csv(&a.test)?;
    let report = classify_embeddings(&train, &test, ProbeConfig::default())?;
    let mut stdout = std::io::stdout().lock();
    stdout
        .write_all(report.table().as_bytes())
        .map_err(|e| Failure::from(Error::io("<stdout>", e)))?;
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> std::result::Result<(), Failure> {
    let synth = make_synthetic(&SyntheticConfig {
        n_groups: a.groups,
        group_size: a.group_size,
        k_true: a.k_true,
        styles: (0..STYLE_COUNT).collect(),
        noise_std: a.noise,
        seed: a.seed,
    })?;
    create_dir(&a.out)?;
    let files = [
        ("images-idx3-ubyte", encode_idx_images(&synth.dataset)),
        ("labels-idx1-ubyte", encode_idx_labels(&synth.class)?),
        ("styles-idx1-ubyte", encode_idx_labels(&synth.style)?),
    ];
    for (name, bytes) in files {
        let path = a.out.join(name);
        write_bytes(&path, &bytes)?;
        println!("{}", path.display());
    }
    Ok(())
}
