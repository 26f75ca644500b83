//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed. Pass criterion numbers as arguments to
//! run a subset.

mod common;

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::{log_sum_exp, normal_quadrature, Oracle};
use ndarray::Array2;
use ugvae::data::{load_idx, make_synthetic, parse_idx_images, structured_groups, Dataset, LabelSet, SyntheticConfig};
use ugvae::eval::{
    classify_embeddings, cross_interpolation, embed_batches, encode_pgm_grid, sample_grid, LabeledPoint, ProbeConfig,
};
use ugvae::generative::GenerativeConfig;
use ugvae::inference::{beta_contribution, classify_d, infer_group_with_noise, GroupNoise};
use ugvae::nets::{gradient_check, init_bundle, GradCheckOptions, ModelDims};
use ugvae::numerics::{
    gaussian_log_density, kl_categorical, kl_gaussian_diag, product_of_diag_gaussians, CategoricalDist, DiagGaussian,
};
use ugvae::objective::{group_elbo_with_noise, loss};
use ugvae::rng::RngStream;
use ugvae::trainer::{load_checkpoint, save_checkpoint, Trainer, TrainConfig};
use ugvae::Error;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * PI * var).ln() - 0.5 * (x - mean).powi(2) / var
}

fn random_gaussian(rng: &mut RngStream, dim: usize) -> DiagGaussian {
    let mean = (0..dim).map(|_| 4.0 * rng.uniform() - 2.0).collect();
    let lv = (0..dim).map(|_| 3.0 * rng.uniform() - 1.5).collect();
    DiagGaussian::new(mean, lv).unwrap()
}

fn random_categorical(rng: &mut RngStream, k: usize) -> CategoricalDist {
    let w: Vec<f64> = (0..k).map(|_| 0.05 + rng.uniform()).collect();
    let s: f64 = w.iter().sum();
    CategoricalDist::new(w.iter().map(|v| v / s).collect()).unwrap()
}

// ---------------------------------------------------------------------------

fn closed_form_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = RngStream::new(101);
    let n_mc = 100_000;
    let mut worst_gauss_z = 0.0_f64;
    let mut worst_cat_z = 0.0_f64;
    let mut worst_cat_enum = 0.0_f64;
    let mut worst_density = 0.0_f64;
    let mut failures = 0;
    for case in 0..50 {
        let dim = 1 + case % 4;
        let q = random_gaussian(&mut rng, dim);
        let p = random_gaussian(&mut rng, dim);
        let (qv, pv) = (q.variance(), p.variance());
        let draws: Vec<f64> = (0..n_mc)
            .map(|_| {
                (0..dim)
                    .map(|j| {
                        let x = q.mean()[j] + qv[j].sqrt() * rng.normal();
                        normal_logpdf(x, q.mean()[j], qv[j]) - normal_logpdf(x, p.mean()[j], pv[j])
                    })
                    .sum()
            })
            .collect();
        let (mc, se) = mean_se(&draws);
        let z = (kl_gaussian_diag(&q, &p).unwrap() - mc).abs() / se;
        worst_gauss_z = worst_gauss_z.max(z);
        failures += usize::from(z > 3.0);

        let k = 2 + case % 7;
        let qc = random_categorical(&mut rng, k);
        let pc = random_categorical(&mut rng, k);
        let exact: f64 = qc.probs().iter().zip(pc.probs()).map(|(a, b)| a * (a / b).ln()).sum();
        let got = kl_categorical(&qc, &pc).unwrap();
        worst_cat_enum = worst_cat_enum.max((got - exact).abs());
        failures += usize::from((got - exact).abs() > 1e-12);
        let cdf: Vec<f64> = qc.probs().iter().scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        }).collect();
        let draws: Vec<f64> = (0..n_mc)
            .map(|_| {
                let u = rng.uniform();
                let i = cdf.iter().position(|c| u < *c).unwrap_or(k - 1);
                (qc.probs()[i] / pc.probs()[i]).ln()
            })
            .collect();
        let (mc, se) = mean_se(&draws);
        let z = (got - mc).abs() / se;
        worst_cat_z = worst_cat_z.max(z);
        failures += usize::from(z > 3.0);

        let x: Vec<f64> = (0..dim).map(|_| 6.0 * rng.uniform() - 3.0).collect();
        let exact: f64 = (0..dim).map(|j| normal_logpdf(x[j], q.mean()[j], qv[j])).sum();
        let err = (gaussian_log_density(&x, &q).unwrap() - exact).abs();
        worst_density = worst_density.max(err);
        failures += usize::from(err > 1e-12);
    }
    let elapsed = start.elapsed();
    let pass = failures == 0 && elapsed < Duration::from_secs(10);
    outcome(
        pass,
        format!(
            "50 cases; max |z| gaussian KL {worst_gauss_z:.2}, categorical KL {worst_cat_z:.2} (limit 3); \
             categorical enumeration err {worst_cat_enum:.1e}, log-density err {worst_density:.1e} (limit 1e-12); \
             {:.2}s (limit 10s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn aggregation_matches_grid() -> Outcome {
    let start = Instant::now();
    let mut rng = RngStream::new(202);
    let (mut worst_mean, mut worst_var) = (0.0_f64, 0.0_f64);
    for case in 0..20 {
        let m = 2 + case % 5;
        let contribs: Vec<DiagGaussian> = (0..m).map(|_| random_gaussian(&mut rng, 1)).collect();
        let lo = contribs.iter().map(|g| g.mean()[0] - 10.0 * g.variance()[0].sqrt()).fold(f64::INFINITY, f64::min);
        let hi = contribs.iter().map(|g| g.mean()[0] + 10.0 * g.variance()[0].sqrt()).fold(f64::NEG_INFINITY, f64::max);
        let n = 200_000;
        let h = (hi - lo) / n as f64;
        let log_prod: Vec<f64> = (0..=n)
            .map(|i| {
                let x = lo + i as f64 * h;
                contribs.iter().map(|g| normal_logpdf(x, g.mean()[0], g.variance()[0])).sum()
            })
            .collect();
        let peak = log_prod.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (mut z0, mut z1, mut z2) = (0.0, 0.0, 0.0);
        for (i, lp) in log_prod.iter().enumerate() {
            let w = if i == 0 || i == n { 0.5 } else { 1.0 } * (lp - peak).exp();
            let x = lo + i as f64 * h;
            z0 += w;
            z1 += w * x;
            z2 += w * x * x;
        }
        let mean = z1 / z0;
        let var = z2 / z0 - mean * mean;
        let p = product_of_diag_gaussians(&contribs).unwrap();
        worst_mean = worst_mean.max((p.mean()[0] - mean).abs());
        worst_var = worst_var.max((p.variance()[0] - var).abs() / var);
    }
    let mut worst_identical = 0.0_f64;
    for m in 1..=64 {
        let g = random_gaussian(&mut rng, 3);
        let p = product_of_diag_gaussians(&vec![g.clone(); m]).unwrap();
        for j in 0..3 {
            let expect = g.variance()[j] / m as f64;
            worst_identical = worst_identical.max((p.variance()[j] - expect).abs() / expect);
            worst_identical = worst_identical.max((p.mean()[j] - g.mean()[j]).abs() / g.mean()[j].abs().max(1.0));
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_mean <= 1e-6 && worst_var <= 1e-6 && worst_identical <= 1e-12 && elapsed < Duration::from_secs(5);
    outcome(
        pass,
        format!(
            "20 grid cases: max mean err {worst_mean:.1e}, max rel var err {worst_var:.1e} (limits 1e-6); \
             identical-contribution law rel err {worst_identical:.1e} (limit 1e-12); {:.2}s (limit 5s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let dims = ModelDims::new(16, 2, 2, 2);
    let config = GenerativeConfig::new(dims, 0.2, 4).unwrap();
    let mut bundle = init_bundle(dims, 303).unwrap();
    let mut rng = RngStream::new(304);
    let x = Array2::from_shape_fn((4, 16), |_| rng.uniform());
    let noise = GroupNoise::draw_single(4, 2, 2, &mut rng);
    let report = gradient_check(
        &mut bundle,
        |b| {
            let g = loss(&x, b, &config, &noise)?;
            Ok((g.tape, g.loss))
        },
        1e-4,
        GradCheckOptions::default(),
    )
    .unwrap();
    let elapsed = start.elapsed();
    let pass = report.mean_rel <= 1e-4 && report.max_rel <= 1e-2 && elapsed < Duration::from_secs(60);
    // diagnostic only: a smaller step separates kink straddles from real gradient errors
    let fine = gradient_check(
        &mut bundle,
        |b| {
            let g = loss(&x, b, &config, &noise)?;
            Ok((g.tape, g.loss))
        },
        1e-4,
        GradCheckOptions {
            step: 1e-5,
            ..Default::default()
        },
    )
    .unwrap();
    let worst = report
        .tensors
        .iter()
        .max_by(|a, b| a.max_rel.total_cmp(&b.max_rel))
        .map(|t| t.name.clone())
        .unwrap_or_default();
    outcome(
        pass,
        format!(
            "{} parameters; mean rel err {:.2e} (limit 1e-4), max {:.2e} in {worst} (limit 1e-2); \
             {:.3}% of coordinates within 1e-4; {:.1}s (limit 60s); diagnostic at step 1e-5: mean {:.2e}, max {:.2e}",
            bundle.parameter_count(),
            report.mean_rel,
            report.max_rel,
            100.0 * report.fraction_within,
            elapsed.as_secs_f64(),
            fine.mean_rel,
            fine.max_rel
        ),
    )
}

fn marginalization_equivalence() -> Outcome {
    let mut worst = 0.0_f64;
    for (i, k) in [1usize, 2, 4, 8].into_iter().enumerate() {
        let dims = ModelDims::new(10, 3, 2, k).with_hidden(24);
        let config = GenerativeConfig::new(dims, 0.2, 5).unwrap();
        for seed in 0..5u64 {
            let bundle = init_bundle(dims, 400 + 10 * i as u64 + seed).unwrap();
            let mut rng = RngStream::new(500 + seed);
            let x = Array2::from_shape_fn((5, 10), |_| rng.uniform());
            let noise = GroupNoise::draw_single(5, 3, 2, &mut rng);
            let got = group_elbo_with_noise(&x, &bundle, &config, &noise).unwrap();
            let rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
            let eps: Vec<Vec<f64>> = noise.eps_z.rows().into_iter().map(|r| r.to_vec()).collect();
            let oracle = Oracle::new(&bundle).group_elbo(&rows, &eps, &noise.eps_beta, 0.2);
            for (t, (pi, kls)) in got.per_sample.iter().zip(&oracle.components) {
                let enumerated: f64 = pi.iter().zip(kls).map(|(p, kl)| p * kl).sum();
                worst = worst.max((t.kl_z - enumerated).abs());
            }
        }
    }
    outcome(
        worst <= 1e-12,
        format!("K in {{1,2,4,8}}, 5 nets each: max |soft kl_z - enumeration| {worst:.1e} (limit 1e-12)"),
    )
}

fn tractable_lower_bound() -> Outcome {
    let dims = ModelDims::new(3, 1, 1, 1).with_hidden(4);
    let config = GenerativeConfig::new(dims, 0.2, 1).unwrap();
    let outer = normal_quadrature(40);
    let fine = normal_quadrature(100);
    let coarse = normal_quadrature(80);
    let mut worst_margin = f64::NEG_INFINITY;
    let mut worst_quad = 0.0_f64;
    let mut lines = Vec::new();
    for draw in 0..10u64 {
        let mut bundle = init_bundle(dims, 600 + draw).unwrap();
        bundle.scale_weights(0.5);
        let mut rng = RngStream::new(700 + draw);
        let x = Array2::from_shape_fn((1, 3), |_| rng.uniform());
        // E over (ε_z, ε_β) of the single-noise ELBO
        let mut elbo = 0.0;
        for &(ez, wz) in &outer {
            for &(eb, wb) in &outer {
                let noise = GroupNoise {
                    eps_z: Array2::from_elem((1, 1), ez),
                    eps_beta: vec![eb],
                };
                elbo += wz * wb * group_elbo_with_noise(&x, &bundle, &config, &noise).unwrap().elbo;
            }
        }
        let oracle = Oracle::new(&bundle);
        let xv = x.row(0).to_vec();
        let log_evidence = |nodes: &[(f64, f64)]| -> f64 {
            let mut terms = Vec::with_capacity(nodes.len() * nodes.len());
            for &(b, wb) in nodes {
                let (pm, plv) = oracle.theta_z[0].gaussian(&[b]);
                let sd = (0.5 * plv[0]).exp();
                for &(u, wz) in nodes {
                    let z = pm[0] + sd * u;
                    let mean = oracle.decode(&[z], &[b]);
                    let lp: f64 = xv.iter().zip(&mean).map(|(a, m)| normal_logpdf(*a, *m, 0.04)).sum();
                    terms.push(wb.ln() + wz.ln() + lp);
                }
            }
            log_sum_exp(&terms)
        };
        let le = log_evidence(&fine);
        worst_quad = worst_quad.max((le - log_evidence(&coarse)).abs());
        let margin = le + 1e-3 - elbo;
        worst_margin = worst_margin.max(-margin);
        lines.push(format!("{:.3}", le - elbo));
    }
    outcome(
        worst_margin <= 0.0 && worst_quad < 1e-3,
        format!(
            "10 draws; gaps log p(x) - ELBO = [{}]; quadrature 80 vs 100 nodes differ by {worst_quad:.1e} (limit 1e-3)",
            lines.join(", ")
        ),
    )
}

fn ablation_identities() -> Outcome {
    let data = make_synthetic(&SyntheticConfig {
        n_groups: 10,
        seed: 61,
        ..Default::default()
    })
    .unwrap()
    .dataset;
    let cfg = TrainConfig {
        epochs: 2,
        group_size: 50,
        seed: 62,
        data_dim: 64,
        d_local: 2,
        g_global: 2,
        k: 1,
        hidden: 64,
        image_rows: 8,
        image_cols: 8,
        ..Default::default()
    };
    let out = ugvae::trainer::train(&data, cfg, None).unwrap();
    let kl_d_zero = out.metrics.iter().all(|m| m.kl_d == 0.0);

    let dims = ModelDims::new(12, 2, 3, 3).with_hidden(16);
    let mut worst = 0.0_f64;
    for seed in 0..10u64 {
        let bundle = init_bundle(dims, 630 + seed).unwrap();
        let mut rng = RngStream::new(640 + seed);
        let x = Array2::from_shape_fn((1, 12), |_| rng.uniform());
        let noise = GroupNoise::draw_single(1, 2, 3, &mut rng);
        let post = infer_group_with_noise(&x, &bundle, &noise).unwrap();
        let xv = x.row(0).to_vec();
        let z = post.z.row(0).to_vec();
        let contribution = beta_contribution(&xv, &classify_d(&z, &bundle).unwrap(), &bundle).unwrap();
        for j in 0..3 {
            worst = worst.max((post.qbeta.mean()[j] - contribution.mean()[j]).abs());
            worst = worst.max((post.qbeta.log_var()[j] - contribution.log_var()[j]).abs());
        }
    }
    outcome(
        kl_d_zero && worst <= 1e-12,
        format!(
            "K=1: kl_d exactly 0 on all {} logged steps = {kl_d_zero}; B=1 qbeta vs contribution max err {worst:.1e} (limit 1e-12)",
            out.metrics.len()
        ),
    )
}

fn style_batches(data: &Dataset, set: &str, n: usize, b: usize, seed: u64) -> Vec<ugvae::data::GroupBatch> {
    structured_groups(data, &LabelSet::parse(set).unwrap(), b, n, &mut RngStream::new(seed)).unwrap()
}

fn points(bundle: &ugvae::nets::NetworkBundle, data: &Dataset, batches: &[ugvae::data::GroupBatch]) -> Vec<LabeledPoint> {
    let (emb, _) = embed_batches(bundle, data, batches).unwrap();
    emb.iter().map(LabeledPoint::from).collect()
}

/// Calibrated on the first verified run of this configuration: -113.19 to
/// 36.36 nats per sample (gain 149.56). The margin keeps a third in reserve.
const SYNTHETIC_MARGIN: f64 = 100.0;

fn synthetic_end_to_end() -> Outcome {
    let start = Instant::now();
    let synth = make_synthetic(&SyntheticConfig {
        n_groups: 50,
        group_size: 100,
        seed: 71,
        ..Default::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        group_size: 64,
        seed: 72,
        data_dim: 64,
        d_local: 2,
        g_global: 4,
        k: 4,
        image_rows: 8,
        image_cols: 8,
        ..Default::default()
    };
    let mut trainer = Trainer::new(cfg).unwrap();
    let out = trainer.train(&synth.dataset, None).unwrap();
    let elapsed = start.elapsed();
    let initial = out.initial_elbo.unwrap();
    let last = out.final_epoch_mean().unwrap();
    let gain = last - initial;

    let train_styles = synth.by_style();
    let held_out = make_synthetic(&SyntheticConfig {
        n_groups: 50,
        group_size: 100,
        seed: 73,
        ..Default::default()
    })
    .unwrap()
    .by_style();
    let mut train_batches = style_batches(&train_styles, "gain0.4:0", 40, 64, 74);
    train_batches.extend(style_batches(&train_styles, "gain1.0:2", 40, 64, 75));
    let mut test_batches = style_batches(&held_out, "gain0.4:0", 40, 64, 76);
    test_batches.extend(style_batches(&held_out, "gain1.0:2", 40, 64, 77));
    let report = classify_embeddings(
        &points(&trainer.bundle, &train_styles, &train_batches),
        &points(&trainer.bundle, &held_out, &test_batches),
        ProbeConfig::default(),
    )
    .unwrap();

    // supplementary: brightness along the β axis of a gain-only interpolation
    let low = style_batches(&held_out, "gain0.4:0", 1, 64, 78).remove(0).x(&held_out);
    let high = style_batches(&held_out, "gain1.0:2", 1, 64, 79).remove(0).x(&held_out);
    let grid = cross_interpolation(&trainer.bundle, &low, &high, 0, 0, 7, (8, 8)).unwrap();
    let brightness: Vec<f64> = (0..7).map(|r| grid.cell(r, 0).iter().sum::<f64>() / 64.0).collect();
    let monotone = brightness.windows(2).all(|w| w[1] >= w[0]) || brightness.windows(2).all(|w| w[1] <= w[0]);

    let pass = gain >= SYNTHETIC_MARGIN && report.test_accuracy >= 0.9 && elapsed < Duration::from_secs(600);
    outcome(
        pass,
        format!(
            "ELBO/sample {initial:.2} -> {last:.2} (gain {gain:.2}, margin {SYNTHETIC_MARGIN}); probe gain-0.4 vs gain-1.0 \
             train {:.3}, held-out test {:.3} (limit 0.9); training {:.1}s (limit 600s); \
             corner-column brightness along β monotone: {monotone}",
            report.train_accuracy,
            report.test_accuracy,
            elapsed.as_secs_f64()
        ),
    )
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("UGVAE_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn mnist_desk_run() -> Outcome {
    let dir = mnist_dir();
    let data = match load_idx(
        &dir.join("train-images-idx3-ubyte"),
        Some(&dir.join("train-labels-idx1-ubyte")),
    ) {
        Ok(d) => d.head(10_000),
        Err(e) => return outcome(false, format!("MNIST subset unavailable: {e}")),
    };
    let start = Instant::now();
    let cfg = TrainConfig {
        epochs: 5,
        group_size: 128,
        seed: 81,
        ..Default::default()
    };
    let mut trainer = Trainer::new(cfg).unwrap();
    let out = match trainer.train(&data, None) {
        Ok(o) => o,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let train_time = start.elapsed();

    let grid_dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("mnist-grids");
    fs::create_dir_all(&grid_dir).unwrap();
    let mut headers_ok = true;
    for k in 0..trainer.bundle.k() {
        let grid = sample_grid(&trainer.bundle, k, 7, 7, (28, 28)).unwrap();
        let bytes = encode_pgm_grid(&grid);
        headers_ok &= bytes.starts_with(b"P5\n202 202\n255\n") && grid.images.len() == 49;
        fs::write(grid_dir.join(format!("component-{k}.pgm")), bytes).unwrap();
    }

    let train_half = data.subset(&(0..5000).collect::<Vec<_>>(), "train-half");
    let test_half = data.subset(&(5000..10_000).collect::<Vec<_>>(), "test-half");
    let mut per_set = Vec::new();
    let mut embed = |d: &Dataset, seed: u64| -> Vec<LabeledPoint> {
        let mut batches = Vec::new();
        for (i, set) in ["even", "odd", "fibonacci", "prime"].iter().enumerate() {
            batches.extend(style_batches(d, set, 50, 128, seed + i as u64));
        }
        let pts = points(&trainer.bundle, d, &batches);
        per_set.push(pts.len());
        pts
    };
    let train_pts = embed(&train_half, 82);
    let test_pts = embed(&test_half, 92);
    let even_odd = |p: &Vec<LabeledPoint>| -> Vec<LabeledPoint> {
        p.iter().filter(|q| q.tag == "even" || q.tag == "odd").cloned().collect()
    };
    let report = classify_embeddings(&even_odd(&train_pts), &even_odd(&test_pts), ProbeConfig::default()).unwrap();
    let total = start.elapsed();
    let pass = headers_ok && report.test_accuracy > 0.65 && total < Duration::from_secs(1800);
    outcome(
        pass,
        format!(
            "ELBO/sample {:.1} -> {:.1}; 10 grids 7x7 with 202x202 PGM headers: {headers_ok}; {} digit-series \
             embeddings; even vs odd probe train {:.3}, test {:.3} (limit > 0.65); train {:.0}s, total {:.0}s \
             (limit 1800s)",
            out.initial_elbo.unwrap_or(f64::NAN),
            out.final_epoch_mean().unwrap_or(f64::NAN),
            per_set.iter().sum::<usize>(),
            report.train_accuracy,
            report.test_accuracy,
            train_time.as_secs_f64(),
            total.as_secs_f64()
        ),
    )
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| -> PathBuf {
        let out = tmp.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_ugvae"))
            .args([
                "train", "--data", "synthetic", "--synth-groups", "10", "--epochs", "2", "--K", "3", "--d", "2",
                "--g", "3", "--B", "50", "--hidden", "32", "--seed", "7", "--checkpoint-every", "10", "--out",
            ])
            .arg(&out)
            .output()
            .expect("binary runs");
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        out
    };
    let (a, b) = (run("a"), run("b"));
    let mut identical = true;
    let mut compared = Vec::new();
    for f in ["final.ckpt", "final.ckpt.json", "metrics.csv", "step-20.ckpt"] {
        let same = fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap();
        identical &= same;
        compared.push(format!("{f}={}", if same { "same" } else { "DIFFERENT" }));
    }
    outcome(identical, format!("two seeded CLI train runs: {}", compared.join(", ")))
}

fn format_round_trips() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        data_dim: 16,
        image_rows: 4,
        image_cols: 4,
        d_local: 2,
        g_global: 2,
        k: 3,
        hidden: 8,
        seed: 91,
        ..Default::default()
    };
    let trainer = Trainer::new(cfg).unwrap();
    let path = tmp.path().join("c.ckpt");
    let ckpt = trainer.checkpoint();
    save_checkpoint(&path, &ckpt).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let path2 = tmp.path().join("d.ckpt");
    save_checkpoint(&path2, &loaded).unwrap();
    let ckpt_ok = loaded == ckpt && fs::read(&path).unwrap() == fs::read(&path2).unwrap();

    let mut idx = vec![0u8, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 128, 7];
    let good = parse_idx_images(&idx).is_ok();
    idx[3] = 0x01;
    let bad_magic = matches!(parse_idx_images(&idx), Err(Error::Format { offset: 0, .. }));

    let grid = sample_grid(&trainer.bundle, 0, 7, 7, (4, 4)).unwrap();
    let small = encode_pgm_grid(&grid).starts_with(b"P5\n34 34\n255\n");
    let mut mnist_grid = grid.clone();
    mnist_grid.image_shape = (28, 28);
    mnist_grid.images = vec![vec![0.5; 784]; 49];
    let bytes = encode_pgm_grid(&mnist_grid);
    let mnist = bytes.starts_with(b"P5\n202 202\n255\n") && bytes.len() == 15 + 202 * 202;
    outcome(
        ckpt_ok && good && bad_magic && small && mnist,
        format!(
            "checkpoint load/save bitwise: {ckpt_ok}; IDX valid accepted: {good}, corrupt magic rejected at offset 0: \
             {bad_magic}; PGM headers 34x34: {small}, 202x202: {mnist}"
        ),
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "closed-form correctness", closed_form_correctness),
        (2, "precision-weighted aggregation", aggregation_matches_grid),
        (3, "gradient fidelity", gradient_fidelity),
        (4, "marginalization equivalence", marginalization_equivalence),
        (5, "tractable lower bound", tractable_lower_bound),
        (6, "ablation identities", ablation_identities),
        (7, "synthetic end-to-end", synthetic_end_to_end),
        (8, "MNIST desk run", mnist_desk_run),
        (9, "determinism", determinism),
        (10, "format round-trips", format_round_trips),
    ];
    let mut failed = Vec::new();
    for (n, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let result = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        println!("criterion {n:>2} [{}] {name}: {}", if result.pass { "PASS" } else { "FAIL" }, result.detail);
        if !result.pass {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
