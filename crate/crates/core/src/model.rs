//! Every trainable component bundled with its parameter registry.

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cis::MappingHead;
use crate::dhp::{self, DhpGroups};
use crate::encoders::{ClassifierHead, EncoderConfig, ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::params::{Ctx, Init, ParamRegistry};
use crate::prompt_bank::PromptBank;

/// Which of the three auxiliary mechanisms take part in stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModuleFlags {
    pub cis: bool,
    pub bga: bool,
    pub dhp: bool,
}

impl Default for ModuleFlags {
    fn default() -> Self {
        ModuleFlags::ALL
    }
}

impl ModuleFlags {
    pub const ALL: ModuleFlags = ModuleFlags {
        cis: true,
        bga: true,
        dhp: true,
    };
    pub const NONE: ModuleFlags = ModuleFlags {
        cis: false,
        bga: false,
        dhp: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Learnable context tokens per prompt.
    pub context_tokens: usize,
    pub modules: ModuleFlags,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            context_tokens: 4,
            modules: ModuleFlags::ALL,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.context_tokens == 0 {
            return Err(Error::config("context_tokens must be positive"));
        }
        if self.encoder.num_identities == 0 || self.encoder.num_clothes == 0 {
            return Err(Error::config("label spaces must be non-empty"));
        }
        // slots plus "<sos> a photo of a ... person. <eos>"
        if self.context_tokens + 7 > self.encoder.max_text_len {
            return Err(Error::config("max_text_len too short for the prompt template"));
        }
        Ok(())
    }

    /// Width of the retrieval feature.
    pub fn final_dim(&self) -> usize {
        if self.modules.dhp {
            4 * self.encoder.shared_dim
        } else {
            self.encoder.shared_dim
        }
    }
}

#[derive(Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub prompts: PromptBank,
    pub mapping: MappingHead,
    /// Classifies the backbone embedding (BGA teacher side).
    pub identity_head: ClassifierHead,
    /// Classifies the bio-enhanced embedding.
    pub bio_head: ClassifierHead,
    /// Classifies the retrieval feature for the identity loss.
    pub final_head: ClassifierHead,
    pub registry: ParamRegistry,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let e = &cfg.encoder;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut registry = ParamRegistry::default();
        let mut init = Init {
            rng: &mut rng,
            dtype: cfg.precision.dtype(),
            device: Device::Cpu,
            registry: &mut registry,
        };
        let image = ImageEncoder::new(&mut init, e)?;
        let text = TextEncoder::new(&mut init, e)?;
        let prompts = PromptBank::new(&mut init, e.num_identities, e.num_clothes, cfg.context_tokens, e.token_dim, e.max_text_len)?;
        let mapping = MappingHead::copied_from(&mut init, image.last_block())?;
        let identity_head = ClassifierHead::new(&mut init, "head.identity", e.shared_dim, e.num_identities)?;
        let bio_head = ClassifierHead::new(&mut init, "head.bio", e.shared_dim, e.num_identities)?;
        let final_head = ClassifierHead::new(&mut init, "head.final", cfg.final_dim(), e.num_identities)?;
        Ok(Model {
            cfg: cfg.clone(),
            image,
            text,
            prompts,
            mapping,
            identity_head,
            bio_head,
            final_head,
            registry,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.cfg.encoder.num_patches().expect("validated config")
    }

    /// Retrieval feature: backbone embedding, concatenated with the three
    /// group embeddings when DHP is enabled. `groups` must then hold one
    /// grouping per image.
    pub fn final_feature(&self, ctx: &Ctx, images: &[&Array3<f32>], groups: Option<&[DhpGroups]>) -> Result<Tensor> {
        let enc = self.image.encode(ctx, images)?;
        match (self.cfg.modules.dhp, groups) {
            (false, _) => Ok(enc.embedding),
            (true, Some(g)) => {
                let locals = dhp::dhp_forward(ctx, &self.image, &enc.penultimate.tokens, g)?;
                dhp::final_feature(&enc.embedding, &locals)
            }
            (true, None) => Err(Error::Contract("DHP enabled but no groupings supplied".into())),
        }
    }
}
