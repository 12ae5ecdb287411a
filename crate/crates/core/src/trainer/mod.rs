//! Two-stage optimization with machine-checked freeze contracts.
//!
//! Stage 1 learns the prompt bank against frozen encoders. Stage 2 trains the
//! image encoder, the clothing mapping head and the classifier heads while
//! the prompt bank and the text encoder stay frozen. After every step the
//! trainer verifies that no frozen parameter received a gradient and that the
//! fingerprints of all frozen groups are unchanged.

pub mod optim;
pub mod schedule;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bga::{bga_distill, bga_enhance, bio_crop};
use crate::checkpoint::{RngState, TrainerState};
use crate::cis::{cis_forward, cis_losses, clothing_crop, Crop};
use crate::data::augment::{augment, AugmentConfig};
use crate::data::sampler::BalancedBatches;
use crate::data::{Dataset, Sample, Split};
use crate::dhp::{dhp_forward, final_feature, shuffle_partition};
use crate::encoders::{ImageEncoding, TokenSequence};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::losses::{self, Composite, LossReport, SimilarityContext, Stage1Inputs};
use crate::model::Model;
use crate::params::{Ctx, Group, GroupSet};
use crate::prompt_bank::PromptKind;
pub use optim::{Adam, AdamConfig};
pub use schedule::LrSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: u8,
    pub trainable: GroupSet,
    pub frozen: GroupSet,
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub optimizer: AdamConfig,
    pub ids_per_batch: usize,
    pub images_per_id: usize,
    /// Sampler passes that make up one epoch.
    #[serde(default = "one")]
    pub passes_per_epoch: usize,
}

fn one() -> usize {
    1
}

impl StagePlan {
    pub fn stage1_groups() -> GroupSet {
        GroupSet::of(&[Group::PromptBank])
    }

    pub fn stage2_groups() -> GroupSet {
        GroupSet::of(&[Group::ImageEncoder, Group::MappingHead, Group::Heads])
    }

    pub fn new(stage: u8, epochs: usize, schedule: LrSchedule, p: usize, k: usize) -> Result<Self> {
        let trainable = match stage {
            1 => Self::stage1_groups(),
            2 => Self::stage2_groups(),
            s => return Err(Error::config(format!("no stage {s}"))),
        };
        let plan = StagePlan {
            stage,
            trainable,
            frozen: trainable.complement(),
            epochs,
            schedule,
            optimizer: AdamConfig::default(),
            ids_per_batch: p,
            images_per_id: k,
            passes_per_epoch: 1,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trainable.intersects(self.frozen) {
            return Err(Error::config("a group cannot be both trainable and frozen"));
        }
        if self.trainable.union(self.frozen) != GroupSet::ALL {
            return Err(Error::config("every group must be either trainable or frozen"));
        }
        let expected = match self.stage {
            1 => Self::stage1_groups(),
            2 => Self::stage2_groups(),
            s => return Err(Error::config(format!("no stage {s}"))),
        };
        if self.trainable != expected {
            return Err(Error::config(format!("stage {} must train exactly {:?}", self.stage, group_names(expected))));
        }
        if self.epochs == 0 || self.ids_per_batch == 0 || self.images_per_id == 0 || self.passes_per_epoch == 0 {
            return Err(Error::config("epochs and batch shape must be positive"));
        }
        self.schedule.validate()?;
        self.optimizer.validate()
    }

    pub fn batch_size(&self) -> usize {
        self.ids_per_batch * self.images_per_id
    }
}

pub fn group_names(g: GroupSet) -> Vec<&'static str> {
    g.iter().map(|g| g.as_str()).collect()
}

/// Stage-independent knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub seed: u64,
    pub augment: AugmentConfig,
    pub sim: SimilarityContext,
    pub label_smoothing: f64,
    pub triplet_margin: f64,
    /// Perturbs a frozen parameter after this global step; used to exercise
    /// the freeze check.
    pub tamper_frozen_at: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            seed: 0,
            augment: AugmentConfig::default(),
            sim: SimilarityContext::default(),
            label_smoothing: 0.0,
            triplet_margin: losses::TRIPLET_MARGIN,
            tamper_frozen_at: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Header {
        stage: u8,
        seed: u64,
        trainable: Vec<String>,
        frozen: Vec<String>,
        config: serde_json::Value,
    },
    Step {
        stage: u8,
        epoch: usize,
        step: usize,
        lr: f64,
        loss: LossReport,
        detail: BTreeMap<String, f64>,
    },
    Epoch {
        stage: u8,
        epoch: usize,
        mean_loss: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rank1: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        map: Option<f64>,
    },
}

/// Append-only JSON-lines log, mirrored to a file when one is attached.
#[derive(Debug, Default)]
pub struct TrainLog {
    lines: Vec<String>,
    file: Option<BufWriter<File>>,
}

impl TrainLog {
    pub fn to_file(path: &Path) -> Result<Self> {
        Ok(TrainLog {
            lines: Vec::new(),
            file: Some(BufWriter::new(File::options().create(true).append(true).open(path)?)),
        })
    }

    pub fn push(&mut self, rec: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(rec)?;
        if let Some(f) = self.file.as_mut() {
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        self.lines.push(line);
        Ok(())
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn records(&self) -> Result<Vec<LogRecord>> {
        self.lines.iter().map(|l| Ok(serde_json::from_str(l)?)).collect()
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.lines {
            h.update(l.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// Frozen embeddings of the training images, computed once for stage 1.
#[derive(Debug)]
struct Stage1Cache {
    v_ori: Tensor,
    v_clo: Tensor,
    row: HashMap<usize, u32>,
}

#[derive(Debug)]
pub struct Trainer<'a> {
    pub model: &'a Model,
    data: &'a Dataset,
    pub plan: StagePlan,
    opts: TrainOptions,
    pub optim: Adam,
    sampler: BalancedBatches,
    rng: ChaCha8Rng,
    pub epochs_done: usize,
    pub global_step: usize,
    pending: VecDeque<Vec<usize>>,
    epoch_losses: Vec<f64>,
    frozen_fp: BTreeMap<Group, String>,
    cache: Option<Stage1Cache>,
    pub log: TrainLog,
}

fn crop_for(sample: &Sample, f: fn(&Array3<f32>, &crate::data::ParsingMask) -> Result<Crop>) -> Result<Crop> {
    match &sample.mask {
        Some(m) => f(&sample.image, m),
        None => Ok(Crop {
            image: sample.image.clone(),
            flagged: true,
        }),
    }
}

fn select_rows(t: &Tensor, rows: &[u32]) -> Result<Tensor> {
    Ok(t.index_select(&Tensor::new(rows, t.device())?, 0)?)
}

fn select_encoding(enc: &ImageEncoding, rows: &[u32]) -> Result<ImageEncoding> {
    let seq = |s: &TokenSequence| -> Result<TokenSequence> {
        Ok(TokenSequence {
            tokens: select_rows(&s.tokens, rows)?,
            provenance: s.provenance,
        })
    };
    Ok(ImageEncoding {
        penultimate: seq(&enc.penultimate)?,
        tokens: seq(&enc.tokens)?,
        embedding: select_rows(&enc.embedding, rows)?,
    })
}

impl<'a> Trainer<'a> {
    /// `log` receives a header record immediately.
    pub fn new(model: &'a Model, data: &'a Dataset, plan: StagePlan, opts: TrainOptions, mut log: TrainLog, config_echo: serde_json::Value) -> Result<Self> {
        plan.validate()?;
        let (h, w) = model.cfg.encoder.image_size;
        if (opts.augment.height, opts.augment.width) != (h, w) {
            return Err(Error::config("augment size differs from the encoder input size"));
        }
        opts.augment.validate()?;
        let train = data.split(Split::Train);
        if train.is_empty() {
            return Err(Error::config("no training samples"));
        }
        if data.num_identities > model.cfg.encoder.num_identities || data.num_clothes > model.cfg.encoder.num_clothes {
            return Err(Error::config("dataset label spaces exceed the model's"));
        }
        let items: Vec<(usize, u32)> = train.iter().map(|&i| (i, data.samples[i].identity)).collect();
        let stream_seed = opts.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(plan.stage as u64);
        let sampler = BalancedBatches::new(&items, plan.ids_per_batch, plan.images_per_id, stream_seed)?;
        let rng = ChaCha8Rng::seed_from_u64(stream_seed ^ 0xA5A5_A5A5);
        let optim = Adam::new(model.registry.in_groups(plan.trainable), plan.optimizer)?;
        let mut frozen_fp = BTreeMap::new();
        for g in plan.frozen.iter() {
            frozen_fp.insert(g, model.registry.fingerprint_group(g)?);
        }
        log.push(&LogRecord::Header {
            stage: plan.stage,
            seed: opts.seed,
            trainable: group_names(plan.trainable).iter().map(|s| s.to_string()).collect(),
            frozen: group_names(plan.frozen).iter().map(|s| s.to_string()).collect(),
            config: config_echo,
        })?;
        let mut t = Trainer {
            model,
            data,
            plan,
            opts,
            optim,
            sampler,
            rng,
            epochs_done: 0,
            global_step: 0,
            pending: VecDeque::new(),
            epoch_losses: Vec::new(),
            frozen_fp,
            cache: None,
            log,
        };
        if t.plan.stage == 1 {
            t.cache = Some(t.build_stage1_cache(&train)?);
        }
        Ok(t)
    }

    fn build_stage1_cache(&mut self, train: &[usize]) -> Result<Stage1Cache> {
        let ctx = Ctx::inference();
        let mut ori = Vec::new();
        let mut clo = Vec::new();
        for chunk in train.chunks(32) {
            let samples: Vec<Sample> = chunk
                .iter()
                .map(|&i| augment(&self.data.samples[i], false, &self.opts.augment, &mut self.rng).0)
                .collect();
            let crops = samples.iter().map(|s| crop_for(s, clothing_crop)).collect::<Result<Vec<_>>>()?;
            let images: Vec<&Array3<f32>> = samples.iter().map(|s| &s.image).collect();
            let clothes: Vec<&Array3<f32>> = crops.iter().map(|c| &c.image).collect();
            ori.push(self.model.image.encode(&ctx, &images)?.embedding);
            clo.push(self.model.image.encode(&ctx, &clothes)?.embedding);
        }
        Ok(Stage1Cache {
            v_ori: Tensor::cat(&ori, 0)?,
            v_clo: Tensor::cat(&clo, 0)?,
            row: train.iter().enumerate().map(|(r, &i)| (i, r as u32)).collect(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.epochs_done >= self.plan.epochs && self.pending.is_empty()
    }

    pub fn current_epoch(&self) -> usize {
        self.epochs_done + 1
    }

    pub fn lr(&self) -> f64 {
        self.plan.schedule.lr(self.current_epoch(), self.global_step)
    }

    fn labels(&self, batch: &[usize]) -> (Vec<u32>, Vec<u32>) {
        batch
            .iter()
            .map(|&i| (self.data.samples[i].identity, self.data.samples[i].clothing))
            .unzip()
    }

    fn stage1_loss(&self, ctx: &Ctx, batch: &[usize]) -> Result<(Composite, BTreeMap<String, f64>)> {
        let cache = self.cache.as_ref().expect("stage 1 cache");
        let rows: Vec<u32> = batch.iter().map(|i| cache.row[i]).collect();
        let v_ori = select_rows(&cache.v_ori, &rows)?;
        let v_clo = select_rows(&cache.v_clo, &rows)?;
        let (y_i, y_c) = self.labels(batch);
        let text_rows = |kind, labels: &[u32]| -> Result<Tensor> {
            let (distinct, pos) = losses::distinct_labels(labels);
            let emb = self.model.prompts.embed(ctx, &self.model.text, kind, &distinct)?;
            select_rows(&emb, &pos)
        };
        let t_id = text_rows(PromptKind::Identity, &y_i)?;
        let t_clo = text_rows(PromptKind::Clothing, &y_c)?;
        let inp = Stage1Inputs {
            v_ori: &v_ori,
            v_clo: &v_clo,
            t_id_rows: &t_id,
            t_clo_rows: &t_clo,
            y_i: &y_i,
            y_c: &y_c,
        };
        Ok((losses::stage1_loss(&inp, self.opts.sim)?, BTreeMap::new()))
    }

    fn stage2_loss(&mut self, ctx: &Ctx, batch: &[usize]) -> Result<(Composite, BTreeMap<String, f64>)> {
        let model = self.model;
        let flags = model.cfg.modules;
        let samples: Vec<Sample> = batch
            .iter()
            .map(|&i| augment(&self.data.samples[i], true, &self.opts.augment, &mut self.rng).0)
            .collect();
        let (y_i, y_c) = self.labels(batch);
        let images: Vec<&Array3<f32>> = samples.iter().map(|s| &s.image).collect();
        let ori = model.image.encode(ctx, &images)?;
        let feature = if flags.dhp {
            let n = model.num_patches();
            let groups = samples
                .iter()
                .map(|_| shuffle_partition(n, &mut self.rng))
                .collect::<Result<Vec<_>>>()?;
            let locals = dhp_forward(ctx, &model.image, &ori.penultimate.tokens, &groups)?;
            final_feature(&ori.embedding, &locals)?
        } else {
            ori.embedding.clone()
        };
        let logits = model.final_head.logits(ctx, &feature)?;
        let ce = losses::cross_entropy_logits(&logits, &y_i, self.opts.label_smoothing)?;
        let tri = losses::triplet_loss(&feature, &y_i, self.opts.triplet_margin)?;
        let zero = ce.zeros_like()?;
        let mut detail = BTreeMap::new();
        let with_mask: Vec<u32> = (0..samples.len() as u32).filter(|&r| samples[r as usize].mask.is_some()).collect();
        let cs = if flags.cis && !with_mask.is_empty() {
            let crops = with_mask
                .iter()
                .map(|&r| crop_for(&samples[r as usize], clothing_crop))
                .collect::<Result<Vec<_>>>()?;
            let sub = select_encoding(&ori, &with_mask)?;
            let out = cis_forward(ctx, &model.image, &model.mapping, &sub, &crops)?;
            let text = model.prompts.all_text_embeddings(&model.registry, &model.text)?;
            let pick = |v: &[u32]| with_mask.iter().map(|&r| v[r as usize]).collect::<Vec<_>>();
            let comp = cis_losses(&out, &text, &pick(&y_i), &pick(&y_c))?;
            for (k, v) in comp.report()?.terms {
                detail.insert(format!("cs.{k}"), v);
            }
            comp.total
        } else {
            zero.clone()
        };
        let bg = if flags.bga {
            let mut rows = Vec::new();
            let mut crops = Vec::new();
            for &r in &with_mask {
                let c = crop_for(&samples[r as usize], bio_crop)?;
                if !c.flagged {
                    rows.push(r);
                    crops.push(c);
                }
            }
            if rows.is_empty() {
                zero.clone()
            } else {
                let bio_images: Vec<&Array3<f32>> = crops.iter().map(|c| &c.image).collect();
                let bio = model.image.encode(ctx, &bio_images)?;
                let enh = bga_enhance(&bio.tokens.tokens, &select_rows(&ori.tokens.tokens, &rows)?)?;
                let d = bga_distill(ctx, &model.image, &model.identity_head, &model.bio_head, &enh.tokens, &select_rows(&ori.embedding, &rows)?)?;
                d.loss
            }
        } else {
            zero
        };
        Ok((losses::stage2_loss(ce, tri, cs, bg)?, detail))
    }

    fn check_grads(&self, grads: &GradStore) -> Result<()> {
        for p in self.model.registry.in_groups(self.plan.frozen) {
            if grads.get(p.var.as_tensor()).is_some() {
                return Err(Error::FreezeViolation {
                    group: format!("{} ({})", p.group, p.name),
                    stage: self.plan.stage,
                });
            }
        }
        Ok(())
    }

    fn check_fingerprints(&self) -> Result<()> {
        for (g, fp) in &self.frozen_fp {
            if &self.model.registry.fingerprint_group(*g)? != fp {
                return Err(Error::FreezeViolation {
                    group: g.to_string(),
                    stage: self.plan.stage,
                });
            }
        }
        Ok(())
    }

    fn tamper(&self) -> Result<()> {
        if let Some(p) = self.model.registry.in_groups(self.plan.frozen).first() {
            let t = p.var.as_tensor();
            p.var.set(&(t + 1e-3)?)?;
        }
        Ok(())
    }

    /// One optimizer step, or `None` once the plan is exhausted.
    pub fn step(&mut self) -> Result<Option<LossReport>> {
        if self.pending.is_empty() {
            if self.epochs_done >= self.plan.epochs {
                return Ok(None);
            }
            let passes = self.plan.passes_per_epoch;
            self.pending = (0..passes).flat_map(|_| self.sampler.epoch()).collect();
        }
        let batch = self.pending.pop_front().expect("refilled");
        let lr = self.lr();
        let ctx = Ctx::train(self.plan.trainable);
        let (loss, detail) = match self.plan.stage {
            1 => self.stage1_loss(&ctx, &batch)?,
            _ => self.stage2_loss(&ctx, &batch)?,
        };
        let report = loss.report()?;
        if !report.value.is_finite() {
            return Err(Error::Numeric { stage: "loss", layer: 0 });
        }
        let grads = loss.total.backward()?;
        self.check_grads(&grads)?;
        self.optim.step(&grads, lr)?;
        if self.opts.tamper_frozen_at == Some(self.global_step) {
            self.tamper()?;
        }
        self.check_fingerprints()?;
        self.log.push(&LogRecord::Step {
            stage: self.plan.stage,
            epoch: self.current_epoch(),
            step: self.global_step,
            lr,
            loss: report.clone(),
            detail,
        })?;
        self.global_step += 1;
        self.epoch_losses.push(report.value);
        if self.pending.is_empty() {
            self.epochs_done += 1;
        }
        Ok(Some(report))
    }

    /// Steps until the current epoch ends. Returns the mean loss.
    pub fn run_epoch(&mut self) -> Result<Option<f64>> {
        let start = self.epochs_done;
        while self.epochs_done == start {
            if self.step()?.is_none() {
                return Ok(None);
            }
        }
        let mean = self.epoch_losses.iter().sum::<f64>() / self.epoch_losses.len().max(1) as f64;
        self.epoch_losses.clear();
        Ok(Some(mean))
    }

    /// Runs the remaining epochs. `on_epoch` may return an evaluation for
    /// the log.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&Model, usize) -> Result<Option<EvalReport>>) -> Result<()> {
        while let Some(mean_loss) = self.run_epoch()? {
            let report = on_epoch(self.model, self.epochs_done)?;
            self.log.push(&LogRecord::Epoch {
                stage: self.plan.stage,
                epoch: self.epochs_done,
                mean_loss,
                rank1: report.as_ref().map(EvalReport::rank1),
                map: report.as_ref().map(|r| r.map),
            })?;
        }
        Ok(())
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            stage: self.plan.stage,
            epochs_done: self.epochs_done,
            global_step: self.global_step,
            pending: self.pending.iter().cloned().collect(),
            rng: RngState::capture(&self.rng),
            sampler_rng: RngState::capture(self.sampler.rng()),
            optimizer_steps: self.optim.steps,
            epoch_losses: self.epoch_losses.clone(),
        }
    }

    /// Continues from a saved state. Parameters must already be loaded.
    pub fn restore(&mut self, state: &TrainerState, moments: &BTreeMap<String, (Tensor, Tensor)>) -> Result<()> {
        if state.stage != self.plan.stage {
            return Err(Error::Checkpoint(format!("state of stage {} for a stage {} trainer", state.stage, self.plan.stage)));
        }
        for name in self.optim.moments.keys() {
            if !moments.contains_key(name) {
                return Err(Error::Checkpoint(format!("optimizer moments of {name} missing")));
            }
        }
        for (name, m) in self.optim.moments.iter_mut() {
            *m = moments[name].clone();
        }
        self.optim.steps = state.optimizer_steps;
        self.epochs_done = state.epochs_done;
        self.global_step = state.global_step;
        self.pending = state.pending.iter().cloned().collect();
        self.rng = state.rng.restore()?;
        self.sampler.set_rng(state.sampler_rng.restore()?);
        self.epoch_losses = state.epoch_losses.clone();
        self.frozen_fp.clear();
        for g in self.plan.frozen.iter() {
            self.frozen_fp.insert(g, self.model.registry.fingerprint_group(g)?);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plans_partition_groups() -> Result<()> {
        for s in [1, 2] {
            let p = StagePlan::new(s, 1, LrSchedule::stage2_default(), 2, 2)?;
            assert!(!p.trainable.intersects(p.frozen));
            assert_eq!(p.trainable.union(p.frozen), GroupSet::ALL);
        }
        let mut p = StagePlan::new(1, 1, LrSchedule::stage1_default(10), 2, 2)?;
        p.trainable = GroupSet::ALL;
        assert!(p.validate().is_err());
        assert!(StagePlan::new(3, 1, LrSchedule::stage2_default(), 2, 2).is_err());
        Ok(())
    }
}
