//! Run configuration from flat `key = value` files.
//!
//! ```text
//! # comments start with '#'
//! model.k = 15
//! model.channels = 32
//! train.lr = 2e-4
//! seed = 7
//! ```
//!
//! The `KPBE_SEED` environment variable overrides `seed`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{JacobianMode, ModelConfig};
use crate::error::{KpbeError, Result};
use crate::training::{LossWeights, OptimizerConfig, TrainConfig};

pub const SEED_ENV: &str = "KPBE_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub max_steps: Option<u64>,
    pub log_every: u64,
    pub seed: u64,
    /// Directory of training clips (one frame directory per clip).
    pub data_dir: Option<PathBuf>,
    /// Directory of backend frame directories, named like the clips.
    pub backend_dir: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub trace_out: Option<PathBuf>,
}

impl Default for RunConfig {
    /// Full-scale schedule: 200 epochs at learning rate 2e-4.
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            max_steps: None,
            log_every: 50,
            seed: 0,
            data_dir: None,
            backend_dir: None,
            checkpoint_out: None,
            trace_out: None,
        }
    }
}

/// Keys accepted in config files, with a short description each.
pub const KEYS: &[(&str, &str)] = &[
    ("model.k", "number of keypoints (must be 15)"),
    ("model.channels", "appearance feature channels"),
    ("model.depth", "feature volume depth"),
    ("model.resolution", "image side, a multiple of 16"),
    ("model.sigma2", "heatmap-difference Gaussian width"),
    ("model.heatmap_temperature", "keypoint softmax temperature"),
    ("model.jacobian", "rotation | identity"),
    ("model.expression_bound", "bound on expression deltas"),
    ("loss.lambda_p", "perceptual loss weight"),
    ("loss.lambda_exp", "expression loss weight"),
    ("loss.lambda_pix", "pixel L1 loss weight"),
    ("train.lr", "Adam learning rate"),
    ("train.beta1", "Adam beta1"),
    ("train.beta2", "Adam beta2"),
    ("train.epochs", "number of epochs"),
    ("train.batch_size", "mini-batch size"),
    ("train.max_steps", "optional cap on optimizer steps"),
    ("train.log_every", "progress log interval in steps"),
    ("seed", "seed for initialization and sample order"),
    ("paths.data", "directory of training clip directories"),
    ("paths.backend", "directory of backend clip directories"),
    ("paths.checkpoint", "checkpoint output path"),
    ("paths.trace", "loss trace CSV output path"),
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| KpbeError::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    /// Desk-scale preset used by the tested path: a short overfit schedule.
    pub fn desk_preset() -> Self {
        Self {
            optimizer: OptimizerConfig {
                learning_rate: 1e-3,
                batch_size: 1,
                epochs: 10_000,
                ..OptimizerConfig::default()
            },
            max_steps: Some(2000),
            ..Self::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| KpbeError::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| KpbeError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "model.k" => m.keypoints = parse(key, value)?,
            "model.channels" => m.channels = parse(key, value)?,
            "model.depth" => m.depth = parse(key, value)?,
            "model.resolution" => m.resolution = parse(key, value)?,
            "model.sigma2" => m.sigma2 = parse(key, value)?,
            "model.heatmap_temperature" => m.heatmap_temperature = parse(key, value)?,
            "model.expression_bound" => m.expression_bound = parse(key, value)?,
            "model.jacobian" => {
                m.jacobian = match value {
                    "rotation" => JacobianMode::Rotation,
                    "identity" => JacobianMode::Identity,
                    _ => return Err(KpbeError::Config(format!("{key}: expected rotation or identity, got {value:?}"))),
                }
            }
            "loss.lambda_p" => self.weights.lambda_p = parse(key, value)?,
            "loss.lambda_exp" => self.weights.lambda_exp = parse(key, value)?,
            "loss.lambda_pix" => self.weights.lambda_pix = parse(key, value)?,
            "train.lr" => self.optimizer.learning_rate = parse(key, value)?,
            "train.beta1" => self.optimizer.beta1 = parse(key, value)?,
            "train.beta2" => self.optimizer.beta2 = parse(key, value)?,
            "train.epochs" => self.optimizer.epochs = parse(key, value)?,
            "train.batch_size" => self.optimizer.batch_size = parse(key, value)?,
            "train.max_steps" => self.max_steps = Some(parse(key, value)?),
            "train.log_every" => self.log_every = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "paths.data" => self.data_dir = Some(value.into()),
            "paths.backend" => self.backend_dir = Some(value.into()),
            "paths.checkpoint" => self.checkpoint_out = Some(value.into()),
            "paths.trace" => self.trace_out = Some(value.into()),
            _ => return Err(KpbeError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Overrides the seed from `KPBE_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        self.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = parse(SEED_ENV, v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training().validate()
    }

    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer,
            weights: self.weights,
            max_steps: self.max_steps,
            seed: self.seed,
            log_every: self.log_every,
        }
    }
}
