//! Single-file checkpoints: every parameter (and optionally the optimizer
//! moments) as safetensors, with a JSON manifest in the header metadata.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use safetensors::tensor::{Dtype, SafeTensors, View};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::{Group, GroupSet};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST_KEY: &str = "ccreid_manifest";
const MOMENT_PREFIX: &str = "__adam__.";

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since JSON numbers cannot hold a `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Checkpoint(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        let pos = self
            .word_pos
            .parse::<u128>()
            .map_err(|e| Error::Checkpoint(format!("rng word position: {e}")))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Where a resumable stage stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub stage: u8,
    pub epochs_done: usize,
    pub global_step: usize,
    /// Batches not yet consumed in the current epoch.
    pub pending: Vec<Vec<usize>>,
    pub rng: RngState,
    pub sampler_rng: RngState,
    pub optimizer_steps: u64,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// `init`, `stage1` or `stage2`.
    pub stage: String,
    pub model: ModelConfig,
    pub seed: u64,
    /// Fingerprint over every parameter.
    pub params_fingerprint: String,
    /// Fingerprint over prompt bank and text encoder.
    pub text_key: String,
    #[serde(default)]
    pub config_echo: Option<serde_json::Value>,
    #[serde(default)]
    pub trainer: Option<TrainerState>,
}

struct Raw {
    dtype: Dtype,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl View for Raw {
    fn dtype(&self) -> Dtype {
        self.dtype
    }
    fn shape(&self) -> &[usize] {
        &self.shape
    }
    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.data)
    }
    fn data_len(&self) -> usize {
        self.data.len()
    }
}

fn to_raw(t: &Tensor) -> Result<Raw> {
    let flat = t.flatten_all()?;
    let (dtype, data) = match t.dtype() {
        DType::F32 => (Dtype::F32, flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        DType::F64 => (Dtype::F64, flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    };
    Ok(Raw {
        dtype,
        shape: t.dims().to_vec(),
        data,
    })
}

fn from_view(view: &safetensors::tensor::TensorView<'_>) -> Result<Tensor> {
    let shape = view.shape().to_vec();
    let bytes = view.data();
    let t = match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        Dtype::F64 => {
            let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        other => return Err(Error::Checkpoint(format!("unsupported stored dtype {other:?}"))),
    };
    Ok(t)
}

pub fn text_key(model: &Model) -> Result<String> {
    model
        .registry
        .fingerprint(GroupSet::of(&[Group::PromptBank, Group::TextEncoder]))
}

/// Manifest describing the current state of `model`.
pub fn manifest_for(model: &Model, stage: &str, seed: u64) -> Result<CheckpointManifest> {
    Ok(CheckpointManifest {
        format_version: FORMAT_VERSION,
        stage: stage.to_string(),
        model: model.cfg.clone(),
        seed,
        params_fingerprint: model.registry.fingerprint(GroupSet::ALL)?,
        text_key: text_key(model)?,
        config_echo: None,
        trainer: None,
    })
}

pub fn save(path: &Path, model: &Model, manifest: &CheckpointManifest, moments: Option<&BTreeMap<String, (Tensor, Tensor)>>) -> Result<()> {
    let mut tensors: Vec<(String, Raw)> = Vec::new();
    for p in model.registry.iter() {
        tensors.push((p.name.clone(), to_raw(p.var.as_tensor())?));
    }
    if let Some(m) = moments {
        for (name, (m1, m2)) in m {
            tensors.push((format!("{MOMENT_PREFIX}m.{name}"), to_raw(m1)?));
            tensors.push((format!("{MOMENT_PREFIX}v.{name}"), to_raw(m2)?));
        }
    }
    let mut meta = HashMap::new();
    meta.insert(MANIFEST_KEY.to_string(), serde_json::to_string(manifest)?);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    safetensors::serialize_to_file(tensors, Some(meta), path).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(())
}

/// Parameters, manifest and optimizer moments read from disk.
#[derive(Debug)]
pub struct Loaded {
    pub manifest: CheckpointManifest,
    pub params: BTreeMap<String, Tensor>,
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

pub fn read(path: &Path) -> Result<Loaded> {
    if !path.exists() {
        return Err(Error::config(format!("checkpoint {} does not exist", path.display())));
    }
    let bytes = fs::read(path)?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let manifest_json = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(MANIFEST_KEY))
        .ok_or_else(|| Error::Checkpoint("missing manifest".into()))?;
    let manifest: CheckpointManifest = serde_json::from_str(manifest_json)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", manifest.format_version)));
    }
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut params = BTreeMap::new();
    let mut first = BTreeMap::new();
    let mut second = BTreeMap::new();
    for (name, view) in st.tensors() {
        let t = from_view(&view)?;
        if let Some(rest) = name.strip_prefix(MOMENT_PREFIX) {
            if let Some(n) = rest.strip_prefix("m.") {
                first.insert(n.to_string(), t);
            } else if let Some(n) = rest.strip_prefix("v.") {
                second.insert(n.to_string(), t);
            }
        } else {
            params.insert(name, t);
        }
    }
    let mut moments = BTreeMap::new();
    for (n, m) in first {
        let v = second
            .remove(&n)
            .ok_or_else(|| Error::Checkpoint(format!("second moment of {n} missing")))?;
        moments.insert(n, (m, v));
    }
    Ok(Loaded {
        manifest,
        params,
        moments,
    })
}

/// Overwrites every parameter of `model` from `loaded`.
pub fn apply(model: &Model, loaded: &Loaded) -> Result<()> {
    if loaded.params.len() != model.registry.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} parameters, model has {}",
            loaded.params.len(),
            model.registry.len()
        )));
    }
    for p in model.registry.iter() {
        let t = loaded
            .params
            .get(&p.name)
            .ok_or_else(|| Error::Checkpoint(format!("parameter {} missing", p.name)))?;
        if t.dims() != p.var.dims() || t.dtype() != p.var.dtype() {
            return Err(Error::Checkpoint(format!("parameter {} has the wrong shape or dtype", p.name)));
        }
        p.var.set(t)?;
    }
    model.prompts.invalidate_cache();
    let fp = model.registry.fingerprint(GroupSet::ALL)?;
    if fp != loaded.manifest.params_fingerprint {
        return Err(Error::Checkpoint("parameter fingerprint mismatch after load".into()));
    }
    Ok(())
}

/// Builds a model from the manifest's configuration and loads its weights.
pub fn load_model(path: &Path) -> Result<(Model, Loaded)> {
    let loaded = read(path)?;
    let model = Model::new(&loaded.manifest.model, loaded.manifest.seed)?;
    apply(&model, &loaded)?;
    Ok((model, loaded))
}
