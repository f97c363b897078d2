//! Flat `key = value` run configuration.
//!
//! One key per line; `#` starts a comment. Keys absent from a file keep
//! their defaults, unknown or repeated keys are errors. [`RunConfig::render`]
//! writes every key in a fixed order and parses back to the same value.
//!
//! ```text
//! scales = 14x4, 7x4   # side x layers, high to low resolution
//! crop = 7
//! epochs = 60
//! lr = 0.01
//! ```

use crate::diffusion::DiffusionSchedule;
use crate::error::{DvpError, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

const KEYS: &[&str] = &[
    "image_side",
    "channels",
    "scales",
    "latent_channels",
    "enc_blocks",
    "width",
    "hidden",
    "crop",
    "aggregation",
    "pseudoinput",
    "log_sigma_init",
    "prior_width",
    "prior_blocks",
    "diffusion_steps",
    "logsnr_max",
    "logsnr_min",
    "epochs",
    "batch_size",
    "lr",
    "end_lr",
    "warmup_epochs",
    "weight_decay",
    "ema_rate",
    "clip_norm",
    "seed",
    "checkpoint_every",
    "val_size",
    "train_limit",
    "eval_batch",
    "log_steps",
];

fn num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| DvpError::Config(format!("{key}: cannot parse {v:?}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(DvpError::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn scales(v: &str) -> Result<Vec<(usize, usize)>> {
    v.split(',')
        .map(|item| {
            let item = item.trim();
            let (s, l) = item
                .split_once('x')
                .ok_or_else(|| DvpError::Config(format!("scales: expected SIDExLAYERS, got {item:?}")))?;
            Ok((num("scales", s.trim())?, num("scales", l.trim())?))
        })
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DvpError::Config(format!("line {}: expected key = value", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(DvpError::Config(format!("line {}: unknown key {k:?}", no + 1)));
            }
            if !seen.insert(k.to_string()) {
                return Err(DvpError::Config(format!("line {}: repeated key {k:?}", no + 1)));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, k: &str, v: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        match k {
            "image_side" => m.image_side = num(k, v)?,
            "channels" => m.channels = num(k, v)?,
            "scales" => m.scales = scales(v)?,
            "latent_channels" => m.latent_channels = num(k, v)?,
            "enc_blocks" => m.enc_blocks = num(k, v)?,
            "width" => m.width = num(k, v)?,
            "hidden" => m.hidden = num(k, v)?,
            "crop" => m.crop = num(k, v)?,
            "aggregation" => m.aggregation = boolean(k, v)?,
            "pseudoinput" => m.pseudoinput = boolean(k, v)?,
            "log_sigma_init" => m.log_sigma_init = num(k, v)?,
            "prior_width" => m.prior_width = num(k, v)?,
            "prior_blocks" => m.prior_blocks = num(k, v)?,
            "diffusion_steps" => m.diffusion.steps = num(k, v)?,
            "logsnr_max" => m.diffusion.logsnr_max = num(k, v)?,
            "logsnr_min" => m.diffusion.logsnr_min = num(k, v)?,
            "epochs" => t.epochs = num(k, v)?,
            "batch_size" => t.batch_size = num(k, v)?,
            "lr" => t.lr = num(k, v)?,
            "end_lr" => t.end_lr = num(k, v)?,
            "warmup_epochs" => t.warmup_epochs = num(k, v)?,
            "weight_decay" => t.weight_decay = num(k, v)?,
            "ema_rate" => t.ema_rate = num(k, v)?,
            "clip_norm" => t.clip_norm = num(k, v)?,
            "seed" => t.seed = num(k, v)?,
            "checkpoint_every" => t.checkpoint_every = num(k, v)?,
            "val_size" => t.val_size = num(k, v)?,
            "train_limit" => t.train_limit = num(k, v)?,
            "eval_batch" => t.eval_batch = num(k, v)?,
            "log_steps" => t.log_steps = boolean(k, v)?,
            _ => unreachable!("key list checked by caller"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let d = &self.model.diffusion;
        DiffusionSchedule::new(d.steps, d.logsnr_max, d.logsnr_min)?;
        self.train.validate()
    }

    pub fn render(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let scales = m
            .scales
            .iter()
            .map(|(s, l)| format!("{s}x{l}"))
            .collect::<Vec<_>>()
            .join(", ");
        let values: Vec<String> = vec![
            m.image_side.to_string(),
            m.channels.to_string(),
            scales,
            m.latent_channels.to_string(),
            m.enc_blocks.to_string(),
            m.width.to_string(),
            m.hidden.to_string(),
            m.crop.to_string(),
            m.aggregation.to_string(),
            m.pseudoinput.to_string(),
            m.log_sigma_init.to_string(),
            m.prior_width.to_string(),
            m.prior_blocks.to_string(),
            m.diffusion.steps.to_string(),
            m.diffusion.logsnr_max.to_string(),
            m.diffusion.logsnr_min.to_string(),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.lr.to_string(),
            t.end_lr.to_string(),
            t.warmup_epochs.to_string(),
            t.weight_decay.to_string(),
            t.ema_rate.to_string(),
            t.clip_norm.to_string(),
            t.seed.to_string(),
            t.checkpoint_every.to_string(),
            t.val_size.to_string(),
            t.train_limit.to_string(),
            t.eval_batch.to_string(),
            t.log_steps.to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
