//! End-to-end runs: data, both training stages, evaluation and artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, CheckpointManifest};
use crate::config::RunConfig;
use crate::data::ingest::ingest_directory;
use crate::data::synthetic::generate_synthetic;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::losses::SimilarityContext;
use crate::model::{Model, ModelConfig};
use crate::trainer::{TrainLog, TrainOptions, Trainer};

/// File layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn run_info(&self) -> PathBuf {
        self.root.join("run.json")
    }
    pub fn log(&self) -> PathBuf {
        self.root.join("train_log.jsonl")
    }
    pub fn stage1(&self) -> PathBuf {
        self.root.join("stage1.safetensors")
    }
    pub fn stage2(&self) -> PathBuf {
        self.root.join("stage2.safetensors")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("eval_report.json")
    }
    pub fn cmc(&self) -> PathBuf {
        self.root.join("cmc.csv")
    }
}

/// Reproducibility record written next to the artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunInfo {
    pub seed: u64,
    pub package_version: String,
    pub dataset_hash: String,
    pub num_samples: usize,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    if let Some(dir) = &cfg.data.dir {
        let ds = Dataset::load(dir)?;
        if ds.samples.first().is_some_and(|s| s.dims() != cfg.model.encoder.image_size) {
            return Err(Error::config("dataset image size differs from model.encoder.image_size"));
        }
        return Ok(ds);
    }
    match &cfg.data.ingest {
        Some(ing) => {
            let (ds, report) = ingest_directory(&ing.root, ing.layout)?;
            if !report.skipped.is_empty() {
                log::warn!("{} files skipped during ingestion", report.skipped.len());
            }
            Ok(ds)
        }
        None => {
            if cfg.data.synthetic.image_size != cfg.model.encoder.image_size {
                return Err(Error::config("data.synthetic.image_size must equal model.encoder.image_size"));
            }
            generate_synthetic(&cfg.data.synthetic)
        }
    }
}

/// Model configuration with label spaces taken from the dataset.
pub fn model_config_for(cfg: &RunConfig, data: &Dataset) -> ModelConfig {
    let mut m = cfg.model.clone();
    m.encoder.num_identities = data.num_identities;
    m.encoder.num_clothes = data.num_clothes;
    m
}

pub fn train_options(cfg: &RunConfig) -> Result<TrainOptions> {
    Ok(TrainOptions {
        seed: cfg.seed,
        augment: cfg.data.augment.clone(),
        sim: SimilarityContext::new(cfg.stage2.tau)?,
        label_smoothing: cfg.stage2.label_smoothing,
        triplet_margin: cfg.stage2.triplet_margin,
        tamper_frozen_at: None,
    })
}

fn config_echo(cfg: &RunConfig) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

pub fn new_log(paths: Option<&RunPaths>) -> Result<TrainLog> {
    match paths {
        Some(p) => TrainLog::to_file(&p.log()),
        None => Ok(TrainLog::default()),
    }
}

pub fn manifest(cfg: &RunConfig, model: &Model, stage: &str) -> Result<CheckpointManifest> {
    let mut m = checkpoint::manifest_for(model, stage, cfg.seed)?;
    m.config_echo = Some(config_echo(cfg)?);
    Ok(m)
}

fn batches_per_epoch(cfg: &RunConfig, data: &Dataset) -> usize {
    data.identities(Split::Train).len().div_ceil(cfg.stage1.ids_per_batch.max(1))
}

/// Prompt learning. Returns the log lines produced.
pub fn run_stage1(cfg: &RunConfig, model: &Model, data: &Dataset, opts: &TrainOptions, log: TrainLog) -> Result<TrainLog> {
    let plan = cfg.plan1(batches_per_epoch(cfg, data))?;
    let mut t = Trainer::new(model, data, plan, opts.clone(), log, config_echo(cfg)?)?;
    t.run(|_, _| Ok(None))?;
    Ok(t.log)
}

/// Image-encoder training. `epoch0` is logged as the reference point.
pub fn run_stage2(cfg: &RunConfig, model: &Model, data: &Dataset, opts: &TrainOptions, log: TrainLog) -> Result<TrainLog> {
    let plan = cfg.plan2()?;
    let mut t = Trainer::new(model, data, plan.clone(), opts.clone(), log, config_echo(cfg)?)?;
    let every = cfg.eval.every_epochs;
    t.run(|m, epoch| {
        if every > 0 && epoch % every == 0 && epoch < plan.epochs {
            Ok(Some(evaluate(m, data, cfg.eval.protocol, &cfg.data.augment, cfg.seed, cfg.eval.max_rank)?))
        } else {
            Ok(None)
        }
    })?;
    Ok(t.log)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub epoch0: EvalReport,
    pub report: EvalReport,
    pub log_hash: String,
    pub report_hash: String,
    pub log_lines: Vec<String>,
    pub seconds: f64,
}

pub fn report_hash(r: &EvalReport) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(r)?)))
}

/// Generates or ingests data, trains both stages and evaluates. With `out`,
/// config echo, run info, log, checkpoints and reports are written there.
pub fn run_all(cfg: &RunConfig, out: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let paths = out.map(RunPaths::new);
    let data = load_dataset(cfg)?;
    if let Some(p) = &paths {
        fs::create_dir_all(&p.root)?;
        fs::write(p.config(), cfg.to_toml()?)?;
        let info = RunInfo {
            seed: cfg.seed,
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            dataset_hash: data.content_hash(),
            num_samples: data.len(),
        };
        fs::write(p.run_info(), serde_json::to_vec_pretty(&info)?)?;
        if p.log().exists() {
            fs::remove_file(p.log())?;
        }
    }
    let model = Model::new(&model_config_for(cfg, &data), cfg.seed)?;
    let opts = train_options(cfg)?;
    let epoch0 = evaluate(&model, &data, cfg.eval.protocol, &cfg.data.augment, cfg.seed, cfg.eval.max_rank)?;
    let log = run_stage1(cfg, &model, &data, &opts, new_log(paths.as_ref())?)?;
    if let Some(p) = &paths {
        checkpoint::save(&p.stage1(), &model, &manifest(cfg, &model, "stage1")?, None)?;
    }
    let log = run_stage2(cfg, &model, &data, &opts, log)?;
    if let Some(p) = &paths {
        checkpoint::save(&p.stage2(), &model, &manifest(cfg, &model, "stage2")?, None)?;
    }
    let report = evaluate(&model, &data, cfg.eval.protocol, &cfg.data.augment, cfg.seed, cfg.eval.max_rank)?;
    if let Some(p) = &paths {
        fs::write(p.report(), serde_json::to_vec_pretty(&report)?)?;
        fs::write(p.cmc(), report.cmc_csv())?;
    }
    Ok(RunOutcome {
        report_hash: report_hash(&report)?,
        log_hash: log.hash(),
        log_lines: log.lines().to_vec(),
        epoch0,
        report,
        seconds: start.elapsed().as_secs_f64(),
    })
}
