//! Run configuration, read from TOML. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::augment::AugmentConfig;
use crate::data::ingest::Layout;
use crate::data::synthetic::SyntheticSpec;
use crate::error::{Error, Result};
use crate::eval::Protocol;
use crate::model::ModelConfig;
use crate::trainer::{AdamConfig, LrSchedule, StagePlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    pub root: PathBuf,
    pub layout: Layout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Used when neither `dir` nor `ingest` is set.
    pub synthetic: SyntheticSpec,
    /// A dataset directory with a manifest, as written by `generate`.
    pub dir: Option<PathBuf>,
    pub ingest: Option<IngestConfig>,
    pub augment: AugmentConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synthetic: SyntheticSpec::default(),
            dir: None,
            ingest: None,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub ids_per_batch: usize,
    pub images_per_id: usize,
    /// Sampler passes per epoch; each pass visits every identity once.
    pub passes_per_epoch: usize,
    pub base_lr: f64,
    pub optimizer: AdamConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            epochs: 120,
            ids_per_batch: 16,
            images_per_id: 4,
            passes_per_epoch: 1,
            base_lr: 3.5e-4,
            optimizer: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub epochs: usize,
    pub ids_per_batch: usize,
    pub images_per_id: usize,
    pub passes_per_epoch: usize,
    pub start_lr: f64,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub tau: f64,
    pub label_smoothing: f64,
    pub triplet_margin: f64,
    pub optimizer: AdamConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            epochs: 120,
            ids_per_batch: 16,
            images_per_id: 4,
            passes_per_epoch: 1,
            start_lr: 5e-7,
            peak_lr: 5e-6,
            warmup_epochs: 10,
            milestones: vec![30, 50],
            gamma: 0.1,
            tau: 1.0,
            label_smoothing: 0.0,
            triplet_margin: 0.3,
            optimizer: AdamConfig::default(),
        }
    }
}

impl Stage2Config {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::WarmupStep {
            start: self.start_lr,
            peak: self.peak_lr,
            warmup_epochs: self.warmup_epochs,
            milestones: self.milestones.clone(),
            gamma: self.gamma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub max_rank: usize,
    /// Evaluate every this many stage-2 epochs (0: only before and after).
    pub every_epochs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            protocol: Protocol::CLOTH_CHANGING,
            max_rank: 10,
            every_epochs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: None,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Desk-scale run: the default schedule shapes compressed to 20 epochs per
    /// stage, with rates suited to encoders trained from scratch.
    pub fn desk() -> Self {
        RunConfig {
            stage1: Stage1Config {
                epochs: 20,
                ids_per_batch: 4,
                images_per_id: 4,
                passes_per_epoch: 1,
                base_lr: 3.5e-3,
                optimizer: AdamConfig::default(),
            },
            stage2: Stage2Config {
                epochs: 20,
                ids_per_batch: 4,
                images_per_id: 4,
                passes_per_epoch: 5,
                start_lr: 1e-4,
                peak_lr: 1e-3,
                warmup_epochs: 2,
                milestones: vec![12, 17],
                gamma: 0.1,
                ..Stage2Config::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn plan1(&self, batches_per_epoch: usize) -> Result<StagePlan> {
        let s = &self.stage1;
        let schedule = LrSchedule::Cosine {
            base: s.base_lr,
            min: 0.0,
            total_steps: (s.epochs * s.passes_per_epoch * batches_per_epoch).max(1),
        };
        let mut p = StagePlan::new(1, s.epochs, schedule, s.ids_per_batch, s.images_per_id)?;
        p.optimizer = s.optimizer;
        p.passes_per_epoch = s.passes_per_epoch;
        p.validate()?;
        Ok(p)
    }

    pub fn plan2(&self) -> Result<StagePlan> {
        let s = &self.stage2;
        let mut p = StagePlan::new(2, s.epochs, s.schedule(), s.ids_per_batch, s.images_per_id)?;
        p.optimizer = s.optimizer;
        p.passes_per_epoch = s.passes_per_epoch;
        p.validate()?;
        Ok(p)
    }

    /// Checks everything that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.augment.validate()?;
        if self.data.dir.is_some() && self.data.ingest.is_some() {
            return Err(Error::config("data.dir and data.ingest are mutually exclusive"));
        }
        if self.data.dir.is_none() && self.data.ingest.is_none() {
            self.data.synthetic.validate()?;
        }
        if (self.data.augment.height, self.data.augment.width) != self.model.encoder.image_size {
            return Err(Error::config("data.augment size must equal model.encoder.image_size"));
        }
        if self.stage2.tau <= 0.0 {
            return Err(Error::config("tau must be positive"));
        }
        if !(0.0..1.0).contains(&self.stage2.label_smoothing) || self.stage2.triplet_margin < 0.0 {
            return Err(Error::config("invalid label smoothing or triplet margin"));
        }
        if self.eval.max_rank == 0 {
            return Err(Error::config("eval.max_rank must be positive"));
        }
        self.plan1(1)?;
        self.plan2()?;
        Ok(())
    }
}
