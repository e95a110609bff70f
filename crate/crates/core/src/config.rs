//! TOML run configuration: world, architecture, training, loss weights, and
//! channel sections plus the root seed. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::ChannelKind;
use crate::cvib::LossWeights;
use crate::models::ArchConfig;
use crate::world::WorldConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain stochastic gradient descent.
    Sgd,
    /// SGD with momentum 0.9 (the default).
    Momentum,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    /// SNRs sampled uniformly per batch during training.
    pub train_snr_db: Vec<f64>,
    /// Dataset size used by `gen`.
    pub n_samples: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    /// Fraction of the dataset held out for actor accuracy reporting.
    pub holdout_frac: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 30,
            batch_size: 64,
            lr: 0.02,
            optimizer: OptimizerKind::Momentum,
            momentum: 0.9,
            train_snr_db: vec![-10.0, -5.0, 0.0, 5.0, 10.0, 20.0],
            n_samples: 20_000,
            pretrain_epochs: 12,
            pretrain_lr: 0.05,
            pretrain_batch: 64,
            holdout_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSection {
    pub kind: ChannelKind,
    pub snr_db: f64,
    pub equalize: bool,
    /// Evaluation grid for `sweep`/`ablate`.
    pub sweep_snr_db: Vec<f64>,
    pub trials: usize,
}

impl Default for ChannelSection {
    fn default() -> Self {
        ChannelSection {
            kind: ChannelKind::Rayleigh,
            snr_db: 0.0,
            equalize: false,
            sweep_snr_db: vec![-10.0, -5.0, 0.0, 5.0, 10.0, 20.0],
            trials: 1000,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub world: WorldConfig,
    pub arch: ArchConfig,
    pub train: TrainSection,
    pub weights: LossWeights,
    pub channel: ChannelSection,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Config = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.world.validate().map_err(ConfigError::Invalid)?;
        self.arch.validate().map_err(ConfigError::Invalid)?;
        self.weights.validate().map_err(ConfigError::Invalid)?;
        if self.world.image_h != self.arch.image_h
            || self.world.image_w != self.arch.image_w
            || self.world.image_d != self.arch.image_d
        {
            return Err(ConfigError::Invalid(
                "world and arch image extents differ".into(),
            ));
        }
        if self.world.n_subtasks != self.arch.n_subtasks
            || self.world.n_actions != self.arch.n_actions
        {
            return Err(ConfigError::Invalid(
                "world and arch subtask/action counts differ".into(),
            ));
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(ConfigError::Invalid("epochs and batch_size must be ≥ 1".into()));
        }
        if !(self.train.lr > 0.0) || !(self.train.pretrain_lr > 0.0) {
            return Err(ConfigError::Invalid("learning rates must be positive".into()));
        }
        if self.train.train_snr_db.is_empty()
            || self.train.train_snr_db.iter().any(|s| !s.is_finite())
        {
            return Err(ConfigError::Invalid(
                "train_snr_db must be a non-empty list of finite values".into(),
            ));
        }
        if !self.channel.snr_db.is_finite()
            || self.channel.sweep_snr_db.iter().any(|s| !s.is_finite())
        {
            return Err(ConfigError::Invalid("channel SNRs must be finite".into()));
        }
        if !(0.0..1.0).contains(&self.train.holdout_frac) {
            return Err(ConfigError::Invalid("holdout_frac must be in [0, 1)".into()));
        }
        Ok(())
    }
}
