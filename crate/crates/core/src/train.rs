//! Adamax with decoupled weight decay, cosine learning rate with linear
//! warmup, EMA shadows, global-norm clipping, and the epoch loop.
//!
//! # Training log
//!
//! [`fit`] emits one JSON object per line. Step records look like
//!
//! ```text
//! {"kind":"step","epoch":0,"step":0,"lr":0.0,"loss":..,"recon":..,"kl":[..],
//!  "entropy":..,"l0":..,"l1":..,"lt":..,"grad_norm":..}
//! ```
//!
//! and every epoch closes with a `"kind":"epoch"` record holding training
//! means, gradient-norm statistics and the validation bound of the EMA
//! weights. Records carry no wall-clock fields, so two runs with the same
//! seed produce identical logs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::dct::norm_matrix_for;
use crate::diffusion::VlbMode;
use crate::error::{DvpError, Result};
use crate::metrics::{eval_nll_bound, NllReport};
use crate::model::{ElboReport, LadderVae};
use crate::rng::{Rng, RngState};
use crate::tensor::{Graph, ParamGrads, ParamStore, Real};

pub const ADAMAX_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAMAX_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub end_lr: f64,
    pub warmup_epochs: f64,
    pub weight_decay: f64,
    pub ema_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Write `epoch{e}.ckpt` after the first epoch and every this many
    /// epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Images split off the end of the training set for validation.
    pub val_size: usize,
    /// Use only the first this many training images; 0 keeps all.
    pub train_limit: usize,
    pub eval_batch: usize,
    /// Emit a record for every optimizer step, not just per epoch.
    pub log_steps: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 250,
            lr: 1e-2,
            end_lr: 1e-5,
            warmup_epochs: 2.0,
            weight_decay: 1e-6,
            ema_rate: 0.999,
            clip_norm: 5.0,
            seed: 0,
            checkpoint_every: 0,
            val_size: 500,
            train_limit: 0,
            eval_batch: 100,
            log_steps: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DvpError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch == 0 {
            return bad("epochs and batch sizes must be positive".into());
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.epochs as f64) {
            return bad(format!("warmup {} must be in [0, epochs)", self.warmup_epochs));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip norm {} must be positive", self.clip_norm));
        }
        if !(0.0..1.0).contains(&self.ema_rate) {
            return bad(format!("EMA rate {} outside [0, 1)", self.ema_rate));
        }
        if !(self.lr > 0.0 && self.end_lr >= 0.0 && self.weight_decay >= 0.0) {
            return bad("learning rates must be positive and weight decay non-negative".into());
        }
        Ok(())
    }
}

/// Adamax moments, kept in `f64` whatever the parameter precision.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamaxState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamaxState {
    pub fn new<T: Real>(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One Adamax update; weight decay is applied to the parameters first.
pub fn adamax_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &ParamGrads<T>,
    lr: f64,
    betas: (f64, f64),
    weight_decay: f64,
    state: &mut AdamaxState,
) -> Result<()> {
    if grads.grads.len() != store.len() || state.m.len() != store.len() {
        return Err(DvpError::usage("optimizer state does not match the parameters"));
    }
    if !grads.all_finite() {
        return Err(DvpError::TrainingFault("non-finite gradient".into()));
    }
    let (b1, b2) = betas;
    state.t += 1;
    let bias = 1.0 - b1.powi(state.t.min(i32::MAX as u64) as i32);
    for (i, p) in store.iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], grads.grads[i].data());
        if m.len() != p.tensor.len() || g.len() != p.tensor.len() {
            return Err(DvpError::usage(format!("optimizer state shape mismatch for {}", p.name)));
        }
        for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let gj = g[j].as_f64();
            let mut wj = w.as_f64();
            wj -= lr * weight_decay * wj;
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = (b2 * v[j]).max(gj.abs());
            wj -= lr * m[j] / (bias * (v[j] + ADAMAX_EPS));
            *w = T::from_f64(wj);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `lr0`, then cosine decay to `lr1` at `total`.
pub fn cosine_lr(step: usize, total: usize, warmup: usize, lr0: f64, lr1: f64) -> f64 {
    if step < warmup {
        return lr0 * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    lr1 + 0.5 * (lr0 - lr1) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Rescale `grads` to norm `max_norm` if larger; returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut ParamGrads<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        for g in &mut grads.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// `shadow <- rate * shadow + (1 - rate) * param`; missing shadows start
/// at the current value.
pub fn ema_update<T: Real>(store: &mut ParamStore<T>, rate: f64) {
    for p in store.iter_mut() {
        match &mut p.ema {
            Some(e) => {
                for (s, &w) in e.data_mut().iter_mut().zip(p.tensor.data()) {
                    *s = T::from_f64(rate * s.as_f64() + (1.0 - rate) * w.as_f64());
                }
            }
            None => p.ema = Some(p.tensor.clone()),
        }
    }
}

/// Resumable loop state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub best_val: f64,
    pub order_rng: RngState,
    pub binarize_rng: RngState,
    pub noise_rng: RngState,
    pub opt: AdamaxState,
}

impl TrainState {
    pub fn new<T: Real>(store: &ParamStore<T>, seed: u64) -> Self {
        Self {
            epoch: 0,
            step: 0,
            best_val: f64::INFINITY,
            order_rng: Rng::derived(seed, 1).state(),
            binarize_rng: Rng::derived(seed, 2).state(),
            noise_rng: Rng::derived(seed, 3).state(),
            opt: AdamaxState::new(store),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct Parts {
    pub recon: f64,
    pub kl: Vec<f64>,
    pub entropy: f64,
    pub l0: f64,
    pub l1: f64,
    pub lt: f64,
}

impl Parts {
    fn from_report(r: &ElboReport) -> Self {
        Self {
            recon: r.recon,
            kl: r.kl.clone(),
            entropy: r.entropy,
            l0: r.l0,
            l1: r.l1,
            lt: r.lt,
        }
    }

    fn accumulate(&mut self, other: &Parts, w: f64) {
        if self.kl.len() < other.kl.len() {
            self.kl.resize(other.kl.len(), 0.0);
        }
        self.recon += w * other.recon;
        for (a, b) in self.kl.iter_mut().zip(&other.kl) {
            *a += w * b;
        }
        self.entropy += w * other.entropy;
        self.l0 += w * other.l0;
        self.l1 += w * other.l1;
        self.lt += w * other.lt;
    }
}

impl From<&NllReport> for Parts {
    fn from(r: &NllReport) -> Self {
        Self {
            recon: r.recon,
            kl: r.kl.clone(),
            entropy: r.entropy,
            l0: r.l0,
            l1: r.l1,
            lt: r.lt,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub kind: String,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(flatten)]
    pub parts: Parts,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub kind: String,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train: Parts,
    pub grad_norm_mean: f64,
    pub grad_norm_max: f64,
    pub val_nll: f64,
    pub val: Parts,
}

/// Outcome of [`fit`].
#[derive(Clone, Debug)]
pub struct FitReport {
    pub epochs: Vec<EpochRecord>,
    /// Every line written to the training log.
    pub log: Vec<String>,
    pub state: TrainState,
}

/// Training and validation splits according to `cfg`.
pub fn split_train_val(train: &Dataset, cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let limited = if cfg.train_limit > 0 && cfg.train_limit < train.len() {
        train.subset(0, cfg.train_limit, "train")?
    } else {
        train.clone()
    };
    limited.split_tail(cfg.val_size)
}

/// Fresh model for `cfg`, with `S` computed from `train` and weights drawn
/// from a stream derived from the training seed.
pub fn init_model<T: Real>(cfg: &RunConfig, train: &Dataset) -> Result<LadderVae<T>> {
    let norm = norm_matrix_for(train, cfg.model.crop)?;
    LadderVae::new(cfg.model.clone(), norm, &mut Rng::derived(cfg.train.seed, 0))
}

struct Log {
    file: Option<fs::File>,
    lines: Vec<String>,
}

impl Log {
    fn emit<S: Serialize>(&mut self, rec: &S) -> Result<()> {
        let line = serde_json::to_string(rec)?;
        if let Some(f) = &mut self.file {
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        self.lines.push(line);
        Ok(())
    }
}

fn save_atomic<T: Real>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ckpt.to_bytes()?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Where [`fit`] writes its log and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct FitOutput {
    pub dir: Option<PathBuf>,
}

/// Train `model` on `train`, validating the EMA weights on `val` after every
/// epoch. Resumes from `state` when given.
pub fn fit<T: Real>(
    model: &mut LadderVae<T>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    state: Option<TrainState>,
    out: &FitOutput,
) -> Result<FitReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(DvpError::usage("training and validation sets must be non-empty"));
    }
    let mut state = state.unwrap_or_else(|| TrainState::new(model.store(), cfg.seed));
    if state.opt.m.len() != model.store().len() {
        return Err(DvpError::usage("resume state does not match the model"));
    }
    if model.store().iter().any(|(_, p)| p.ema.is_none()) {
        model.store_mut().init_ema();
    }
    let mut log = Log {
        file: None,
        lines: Vec::new(),
    };
    if let Some(dir) = &out.dir {
        fs::create_dir_all(dir)?;
        let path = dir.join("train.jsonl");
        let f = if state.epoch > 0 {
            fs::OpenOptions::new().append(true).create(true).open(path)?
        } else {
            fs::File::create(path)?
        };
        log.file = Some(f);
    }

    let batch = cfg.batch_size.min(train.len());
    let per_epoch = train.len() / batch;
    let total = per_epoch * cfg.epochs;
    let warmup = (cfg.warmup_epochs * per_epoch as f64).round() as usize;
    let mut order_rng = Rng::from_state(state.order_rng);
    let mut bin_rng = Rng::from_state(state.binarize_rng);
    let mut noise_rng = Rng::from_state(state.noise_rng);
    let mut epochs = Vec::new();

    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order_rng.shuffle(&mut order);
        let mut sums = Parts::default();
        let (mut loss_sum, mut gn_sum, mut gn_max) = (0.0, 0.0, 0.0f64);
        let mut lr = 0.0;
        for b in 0..per_epoch {
            let idx = &order[b * batch..(b + 1) * batch];
            let x = train.binarized_batch::<T>(idx, &mut bin_rng);
            let mut g = Graph::new();
            let res = model.forward_train(&mut g, &x, &mut noise_rng, VlbMode::Stochastic);
            let outcome = res.and_then(|o| {
                g.backward(o.loss)?;
                let mut grads = g.param_grads(model.store());
                let norm = clip_global_norm(&mut grads, cfg.clip_norm);
                lr = cosine_lr(state.step, total, warmup, cfg.lr, cfg.end_lr);
                adamax_step(model.store_mut(), &grads, lr, ADAMAX_BETAS, cfg.weight_decay, &mut state.opt)?;
                Ok((o, norm))
            });
            let (o, norm) = match outcome {
                Ok(v) => v,
                Err(e) => {
                    log.emit(&serde_json::json!({
                        "kind": "fault",
                        "epoch": epoch,
                        "step": state.step,
                        "detail": e.to_string(),
                    }))?;
                    return Err(e);
                }
            };
            ema_update(model.store_mut(), cfg.ema_rate);
            let parts = Parts::from_report(&o.report);
            let loss = -o.report.elbo;
            if cfg.log_steps {
                log.emit(&StepRecord {
                    kind: "step".into(),
                    epoch,
                    step: state.step,
                    lr,
                    loss,
                    parts: parts.clone(),
                    grad_norm: norm,
                })?;
            }
            sums.accumulate(&parts, 1.0 / per_epoch as f64);
            loss_sum += loss;
            gn_sum += norm;
            gn_max = gn_max.max(norm);
            state.step += 1;
        }

        let ema = model.ema_model();
        let val_report = eval_nll_bound(&ema, val, 1, cfg.seed, cfg.eval_batch)?;
        state.epoch += 1;
        state.order_rng = order_rng.state();
        state.binarize_rng = bin_rng.state();
        state.noise_rng = noise_rng.state();
        let rec = EpochRecord {
            kind: "epoch".into(),
            epoch,
            step: state.step,
            lr,
            train_loss: loss_sum / per_epoch as f64,
            train: sums,
            grad_norm_mean: gn_sum / per_epoch as f64,
            grad_norm_max: gn_max,
            val_nll: val_report.nll,
            val: Parts::from(&val_report),
        };
        log.emit(&rec)?;
        epochs.push(rec);

        let improved = val_report.nll < state.best_val;
        if improved {
            state.best_val = val_report.nll;
        }
        if let Some(dir) = &out.dir {
            let ckpt = Checkpoint::capture(model, cfg, &state);
            save_atomic(&ckpt, &dir.join("last.ckpt"))?;
            if improved {
                save_atomic(&ckpt, &dir.join("best.ckpt"))?;
            }
            if cfg.checkpoint_every > 0 && (state.epoch == 1 || state.epoch % cfg.checkpoint_every == 0) {
                save_atomic(&ckpt, &dir.join(format!("epoch{}.ckpt", state.epoch)))?;
            }
        }
    }
    Ok(FitReport {
        epochs,
        log: log.lines,
        state,
    })
}
