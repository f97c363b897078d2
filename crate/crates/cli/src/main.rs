//! `dvp`: train, evaluate and sample DVP-VAE models on IDX image data.

mod grid;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use dvp_core::data::{load_mnist_dir, Dataset};
use dvp_core::dct::{f_dct, f_dct_dagger, norm_matrix_for};
use dvp_core::metrics::{active_units, eval_nll_bound};
use dvp_core::train::{fit, init_model, split_train_val, FitOutput};
use dvp_core::{Checkpoint, RunConfig, Rng, Tensor};

use grid::{enlarge, Grid};

/// Weights are stored and run in single precision.
type F = f32;

#[derive(Parser)]
#[command(name = "dvp", version, about = "Hierarchical VAE with a diffusion-based VampPrior")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes train.jsonl, checkpoints and report.json to --out.
    Train {
        /// Run configuration (`key = value` lines). Optional with --resume.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory with train-/t10k- IDX files (optionally gzipped).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed of the configuration.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Negative ELBO bound and active units of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated subset of `elbo,au`.
        #[arg(long, default_value = "elbo,au", value_delimiter = ',')]
        metrics: Vec<Metric>,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Noise passes averaged for the bound.
        #[arg(long, default_value_t = 1)]
        samples: usize,
        /// Defaults to the training seed, which reproduces the logged
        /// validation bound.
        #[arg(long)]
        seed: Option<u64>,
        /// Use only the first this many images; 0 keeps all.
        #[arg(long, default_value_t = 0)]
        limit: usize,
        #[arg(long, default_value_t = 0.01)]
        delta: f64,
        /// Posterior passes per image for active units.
        #[arg(long, default_value_t = 5)]
        chains: usize,
        /// Evaluate the raw weights instead of their EMA.
        #[arg(long)]
        live: bool,
        /// Report file; defaults to eval-<split>.json next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid of unconditional samples (Bernoulli means).
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Put the lifted pseudoinput above each row of samples.
        #[arg(long)]
        show_pseudoinputs: bool,
    },
    /// Generative reconstructions: data on top, then rows that take
    /// posterior latents at more and more scales.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Scale sides in the order they switch to the posterior; defaults
        /// to low to high resolution.
        #[arg(long, value_delimiter = ',')]
        scales: Vec<usize>,
        #[arg(long, default_value_t = 0.2)]
        temperature: f64,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Normalization matrix of the training images and example
    /// (x, u, u_x) triples.
    InspectDct {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 7)]
        d: usize,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Metric {
    Elbo,
    Au,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Test,
    Val,
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train {
            config,
            data,
            out,
            seed,
            resume,
        } => train(config.as_deref(), &data, &out, seed, resume.as_deref()),
        Cmd::Eval {
            ckpt,
            data,
            metrics,
            split,
            samples,
            seed,
            limit,
            delta,
            chains,
            live,
            out,
        } => {
            let opts = EvalOpts {
                metrics,
                split,
                samples,
                seed,
                limit,
                delta,
                chains,
                live,
            };
            eval(&ckpt, &data, &opts, out)
        }
        Cmd::Sample {
            ckpt,
            n,
            temperature,
            seed,
            out,
            show_pseudoinputs,
        } => sample(&ckpt, n, temperature, seed, &out, show_pseudoinputs),
        Cmd::Reconstruct {
            ckpt,
            data,
            scales,
            temperature,
            n,
            seed,
            out,
        } => reconstruct(&ckpt, &data, &scales, temperature, n, seed, &out),
        Cmd::InspectDct { data, d, n, out } => inspect_dct(&data, d, n, &out),
    }
}

fn load_data(dir: &Path, cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = load_mnist_dir(dir).with_context(|| format!("loading data from {}", dir.display()))?;
    let m = &cfg.model;
    for ds in [&train, &test] {
        ensure!(
            ds.channels() == m.channels && ds.side() == m.image_side,
            "{} images are {}x{}x{}, the model expects {}x{}x{}",
            ds.split,
            ds.channels(),
            ds.side(),
            ds.side(),
            m.channels,
            m.image_side,
            m.image_side
        );
    }
    Ok((train, test))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint<F>> {
    Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn train(config: Option<&Path>, data: &Path, out: &Path, seed: Option<u64>, resume: Option<&Path>) -> Result<()> {
    let from_file = config
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::parse(&text).with_context(|| format!("in {}", p.display()))
        })
        .transpose()?;
    let resumed = resume.map(load_checkpoint).transpose()?;

    let mut cfg = match (&from_file, &resumed) {
        (Some(c), Some(ck)) => {
            ensure!(c.model == ck.config.model, "--config describes a different model than the checkpoint");
            c.clone()
        }
        (Some(c), None) => c.clone(),
        (None, Some(ck)) => ck.config.clone(),
        (None, None) => bail!("train needs --config or --resume"),
    };
    if let Some(s) = seed {
        if let Some(ck) = &resumed {
            ensure!(s == ck.config.train.seed, "--seed differs from the seed of the resumed run");
        }
        cfg.train.seed = s;
    }

    let (train_all, test) = load_data(data, &cfg)?;
    let (train_set, val_set) = split_train_val(&train_all, &cfg.train)?;
    let (mut model, state) = match &resumed {
        Some(ck) => (ck.to_model()?, Some(ck.state.clone())),
        None => (init_model::<F>(&cfg, &train_set)?, None),
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.render())?;
    eprintln!(
        "training {} parameters on {} images ({} validation), {} epochs",
        model.num_params(),
        train_set.len(),
        val_set.len(),
        cfg.train.epochs
    );

    let report = fit(
        &mut model,
        &train_set,
        &val_set,
        &cfg.train,
        state,
        &FitOutput {
            dir: Some(out.to_path_buf()),
        },
    )?;

    let ema = model.ema_model();
    let test_report = eval_nll_bound(&ema, &test, 1, cfg.train.seed, cfg.train.eval_batch)?;
    let last = report.epochs.last();
    write_json(
        &out.join("report.json"),
        &json!({
            "params": model.num_params(),
            "epochs": report.state.epoch,
            "steps": report.state.step,
            "final_val_nll": last.map(|e| e.val_nll),
            "best_val_nll": report.state.best_val,
            "test": test_report,
        }),
    )?;
    if let Some(e) = last {
        println!("final validation nll bound: {:.4} nats", e.val_nll);
    }
    println!("test nll bound: {:.4} nats", test_report.nll);
    Ok(())
}

struct EvalOpts {
    metrics: Vec<Metric>,
    split: Split,
    samples: usize,
    seed: Option<u64>,
    limit: usize,
    delta: f64,
    chains: usize,
    live: bool,
}

fn eval(ckpt_path: &Path, data: &Path, o: &EvalOpts, out: Option<PathBuf>) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let cfg = &ckpt.config;
    let (train_all, test) = load_data(data, cfg)?;
    let mut set = match o.split {
        Split::Test => test,
        Split::Val => split_train_val(&train_all, &cfg.train)?.1,
    };
    if o.limit > 0 && o.limit < set.len() {
        set = set.subset(0, o.limit, set.split.clone())?;
    }
    let live = ckpt.to_model()?;
    let model = if o.live { live } else { live.ema_model() };
    let seed = o.seed.unwrap_or(cfg.train.seed);
    let split = match o.split {
        Split::Test => "test",
        Split::Val => "val",
    };

    let mut report = json!({
        "checkpoint": ckpt_path.display().to_string(),
        "split": split,
        "images": set.len(),
        "seed": seed,
        "weights": if o.live { "live" } else { "ema" },
    });
    if o.metrics.contains(&Metric::Elbo) {
        let r = eval_nll_bound(&model, &set, o.samples, seed, cfg.train.eval_batch)?;
        println!("nll bound ({split}): {:.4} nats", r.nll);
        report["elbo"] = serde_json::to_value(&r)?;
    }
    if o.metrics.contains(&Metric::Au) {
        let r = active_units(&model, &set, o.delta, o.chains, seed)?;
        println!("active units ({split}): {:.2}% at delta {}", 100.0 * r.au, o.delta);
        let per_layer: Vec<String> = r.per_layer.iter().map(|v| format!("{:.1}", 100.0 * v)).collect();
        println!("  per layer: {}", per_layer.join(" "));
        report["au"] = serde_json::to_value(&r)?;
    }
    let out = out.unwrap_or_else(|| ckpt_path.with_file_name(format!("eval-{split}.json")));
    write_json(&out, &report)
}

fn grid_cols(n: usize) -> usize {
    ((n as f64).sqrt().ceil() as usize).max(1)
}

fn sample(ckpt_path: &Path, n: usize, temperature: f64, seed: u64, out: &Path, show_u: bool) -> Result<()> {
    ensure!(n > 0, "--n must be positive");
    ensure!(temperature >= 0.0, "--temperature must be non-negative");
    let ckpt = load_checkpoint(ckpt_path)?;
    let m = &ckpt.config.model;
    ensure!(!show_u || m.pseudoinput, "this model has no pseudoinputs to show");
    let model = ckpt.to_model()?.ema_model();
    let gen = model.generate(n, temperature, &mut Rng::new(seed))?;

    let cols = grid_cols(n);
    let chunks = n.div_ceil(cols);
    let per = if show_u { 2 } else { 1 };
    let mut grid = Grid::new(chunks * per, cols, m.channels, m.image_side)?;
    for r in 0..chunks {
        let k = cols.min(n - r * cols);
        if show_u {
            grid.set_row(per * r, &gen.u_x.slice_outer(r * cols, k)?);
        }
        grid.set_row(per * r + per - 1, &gen.images.slice_outer(r * cols, k)?);
    }
    grid.save(out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn reconstruct(
    ckpt_path: &Path,
    data: &Path,
    scales: &[usize],
    temperature: f64,
    n: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    ensure!(n > 0, "--n must be positive");
    let ckpt = load_checkpoint(ckpt_path)?;
    let m = &ckpt.config.model;
    let scales: Vec<usize> = if scales.is_empty() {
        m.scales.iter().rev().map(|s| s.0).collect()
    } else {
        scales.to_vec()
    };
    let (_, test) = load_data(data, &ckpt.config)?;
    let n = n.min(test.len());
    let model = ckpt.to_model()?.ema_model();
    let mut rng = Rng::new(seed);
    let idx: Vec<usize> = (0..n).collect();
    let x = test.binarized_batch::<F>(&idx, &mut rng);

    let mut grid = Grid::new(scales.len() + 2, n, m.channels, m.image_side)?;
    grid.set_row(0, &x);
    for k in 0..=scales.len() {
        let y = model.generative_reconstruction(&x, &scales[..k], temperature, &mut rng)?;
        grid.set_row(k + 1, &y);
    }
    grid.save(out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn inspect_dct(data: &Path, d: usize, n: usize, out: &Path) -> Result<()> {
    let (train, _) = load_mnist_dir(data).with_context(|| format!("loading data from {}", data.display()))?;
    ensure!(d > 0 && d <= train.side(), "--d must be in 1..={}", train.side());
    let norm = norm_matrix_for(&train, d)?;
    fs::create_dir_all(out)?;

    let (c, side) = (train.channels(), train.side());
    let s = norm.s.to_f64();
    let mut text = format!("# normalization matrix S, {c} x {d} x {d}, from {} images\n", train.len());
    for ch in 0..c {
        text.push_str(&format!("# channel {ch}\n"));
        for k in 0..d {
            let row: Vec<String> = (0..d).map(|j| format!("{:.6}", s[(ch * d + k) * d + j])).collect();
            text.push_str(&row.join(" "));
            text.push('\n');
        }
    }
    fs::write(out.join("S.txt"), text)?;

    let smax = s.iter().cloned().fold(0.0, f64::max);
    let mut sgrid = Grid::new(1, c, 1, side)?;
    for ch in 0..c {
        let tile: Vec<f64> = s[ch * d * d..(ch + 1) * d * d].iter().map(|v| v / smax).collect();
        sgrid.set(0, ch, enlarge(&tile, 1, d, side));
    }
    sgrid.save(&out.join("S.png"))?;

    // Rows of x, u (mapped from [-1, 1]) and the lift u_x.
    let n = n.min(train.len());
    let mut grid = Grid::new(n, 3, c, side)?;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let x: Tensor<f64> = train.image(i);
        let u = f_dct(&x, &norm)?;
        let ux = f_dct_dagger(&u, &norm, side)?;
        worst = worst.max(u.to_f64().iter().fold(0.0, |a, v| a.max(v.abs())));
        grid.set(i, 0, x.to_f64());
        let shown: Vec<f64> = u.to_f64().iter().map(|v| 0.5 * (v + 1.0)).collect();
        grid.set(i, 1, enlarge(&shown, c, d, side));
        grid.set(i, 2, ux.to_f64());
    }
    grid.save(&out.join("triptych.png"))?;
    println!("wrote S.txt, S.png and triptych.png to {}", out.display());
    println!("largest |u| over the shown images: {worst:.4}");
    Ok(())
}
