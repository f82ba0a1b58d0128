//! Run configuration: a TOML file with `model`, `moe`, `distill` and `train`
//! sections. Missing keys take their defaults.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::MaskingConfig;
use super::optim::AdamConfig;
use crate::distill::DistillConfig;
use crate::error::{Result, TcdError};
use crate::moe::MoEConfig;
use crate::transformer::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Teacher,
    MoeBaseline,
    MoeTcd,
}

impl Mode {
    pub fn is_moe(self) -> bool {
        !matches!(self, Mode::Teacher)
    }

    pub fn distills(self) -> bool {
        matches!(self, Mode::MoeTcd)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Teacher => "teacher",
            Mode::MoeBaseline => "moe-baseline",
            Mode::MoeTcd => "moe-tcd",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = TcdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Mode::Teacher),
            "moe-baseline" => Ok(Mode::MoeBaseline),
            "moe-tcd" => Ok(Mode::MoeTcd),
            other => Err(TcdError::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub epochs: u64,
    /// Caps the run (and the schedule length) below `epochs` worth of steps.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    /// Packed sequence length including `[CLS]` and `[SEP]`.
    pub seq_len: usize,
    pub val_fraction: f64,
    /// Extra checkpoint every this many steps; 0 keeps epoch checkpoints only.
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub seed: u64,
    /// Masking seed for validation and out-of-distribution scoring.
    pub eval_seed: u64,
    pub adam: AdamConfig,
    pub masking: MaskingConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-4,
            warmup_steps: 10_000,
            epochs: 40,
            max_steps: None,
            batch_size: 512,
            seq_len: 128,
            val_fraction: 0.05,
            checkpoint_every: 0,
            log_every: 1,
            seed: 0,
            eval_seed: 1234,
            adam: AdamConfig::default(),
            masking: MaskingConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `vocab_size` is an upper bound; the built vocabulary may be smaller.
    pub model: ModelConfig,
    pub moe: MoEConfig,
    pub distill: DistillConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| TcdError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TcdError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| TcdError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.moe.validate()?;
        self.distill.validate()?;
        self.train.masking.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.epochs == 0 || t.log_every == 0 {
            return Err(TcdError::Config("train.batch_size, epochs and log_every must be positive".into()));
        }
        if t.seq_len < 3 || t.seq_len > self.model.max_seq_len {
            return Err(TcdError::Config(format!(
                "train.seq_len {} must lie in [3, model.max_seq_len = {}]",
                t.seq_len, self.model.max_seq_len
            )));
        }
        if !(t.peak_lr > 0.0) {
            return Err(TcdError::Config("train.peak_lr must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
