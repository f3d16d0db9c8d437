//! Run configuration: a TOML file with command-line overrides on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::OptimConfig;
use crate::error::{HctError, Result};
use crate::model::{ModelConfig, Stage};
use crate::objectives::LossWeights;

/// How per-class loss weights are derived from training frequencies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassWeighting {
    #[default]
    Inverse,
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    /// Save a checkpoint every this many epochs; 0 saves only the last.
    pub checkpoint_every: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { epochs: 5, warmup_epochs: 1, batch_size: 20, checkpoint_every: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub stage: Stage,
    /// Dataset container written by `gen-data`.
    pub data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub class_weighting: ClassWeighting,
    pub loss: LossWeights,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stage: Stage::Joint,
            data: None,
            out_dir: None,
            class_weighting: ClassWeighting::Inverse,
            loss: LossWeights::default(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

/// Values given on the command line; each one replaces the file's value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub stage: Option<Stage>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| HctError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HctError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            HctError::Config(m) => HctError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HctError::Config(e.to_string()))
    }

    pub fn apply(mut self, o: &Overrides) -> Result<Self> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(s) = o.stage {
            self.stage = s;
        }
        if let Some(e) = o.epochs {
            self.schedule.epochs = e;
        }
        if let Some(b) = o.batch_size {
            self.schedule.batch_size = b;
        }
        if let Some(d) = &o.data {
            self.data = Some(d.clone());
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = Some(d.clone());
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        let s = &self.schedule;
        if s.epochs == 0 || s.epochs <= s.warmup_epochs {
            return Err(HctError::Config(format!(
                "epochs ({}) must exceed warm-up epochs ({})",
                s.epochs, s.warmup_epochs
            )));
        }
        if s.batch_size == 0 {
            return Err(HctError::Config("batch size must be positive".into()));
        }
        if !self.model.icl.pairs.is_empty() && s.batch_size < 2 {
            return Err(HctError::Config("contrastive pairs need a batch size of at least 2".into()));
        }
        Ok(())
    }

    /// SHA-256 over everything that shapes the run except file locations.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.data = None;
        c.out_dir = None;
        let json = serde_json::to_string(&c).expect("run configs serialize");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
