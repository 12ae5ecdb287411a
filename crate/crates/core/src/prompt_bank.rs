//! Learnable identity- and clothing-specific prompt contexts.

use std::sync::Mutex;

use candle_core::Tensor;

use crate::encoders::{PromptTemplate, TextEncoder};
use crate::error::{Error, Result};
use crate::params::{Ctx, Group, GroupSet, Init, Param, ParamRegistry};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    Identity,
    Clothing,
}

impl PromptKind {
    fn terminal(&self) -> &'static str {
        match self {
            PromptKind::Identity => "person.",
            PromptKind::Clothing => "clothes.",
        }
    }
}

/// `"A photo of a X … X person."` / `"… clothes."` with `m` slots.
pub fn template(kind: PromptKind, m: usize, max_len: usize) -> Result<PromptTemplate> {
    let mut words = vec!["A", "photo", "of", "a"];
    words.extend(std::iter::repeat_n("X", m));
    words.push(kind.terminal());
    PromptTemplate::from_words(&words, max_len)
}

#[derive(Debug)]
pub struct PromptBank {
    /// `[num_identities, M, token_dim]`
    pub identity_contexts: Param,
    /// `[num_clothes, M, token_dim]`
    pub clothing_contexts: Param,
    pub m: usize,
    identity_template: PromptTemplate,
    clothing_template: PromptTemplate,
    cache: Mutex<Option<CachedEmbeddings>>,
}

#[derive(Debug, Clone)]
struct CachedEmbeddings {
    key: String,
    identity: Tensor,
    clothing: Tensor,
}

/// Text embeddings for every identity and clothing prompt.
#[derive(Debug, Clone)]
pub struct TextEmbeddings {
    /// `[num_identities, shared_dim]`
    pub identity: Tensor,
    /// `[num_clothes, shared_dim]`
    pub clothing: Tensor,
}

impl PromptBank {
    pub fn new(init: &mut Init, num_identities: usize, num_clothes: usize, m: usize, dim: usize, max_len: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::config("prompt bank needs at least one context token"));
        }
        Ok(PromptBank {
            identity_contexts: init.normal("prompt.identity", Group::PromptBank, &[num_identities, m, dim], 0.02)?,
            clothing_contexts: init.normal("prompt.clothing", Group::PromptBank, &[num_clothes, m, dim], 0.02)?,
            m,
            identity_template: template(PromptKind::Identity, m, max_len)?,
            clothing_template: template(PromptKind::Clothing, m, max_len)?,
            cache: Mutex::new(None),
        })
    }

    pub fn num_identities(&self) -> usize {
        self.identity_contexts.var.dim(0).unwrap_or(0)
    }

    pub fn num_clothes(&self) -> usize {
        self.clothing_contexts.var.dim(0).unwrap_or(0)
    }

    pub fn template(&self, kind: PromptKind) -> &PromptTemplate {
        match kind {
            PromptKind::Identity => &self.identity_template,
            PromptKind::Clothing => &self.clothing_template,
        }
    }

    fn param(&self, kind: PromptKind) -> &Param {
        match kind {
            PromptKind::Identity => &self.identity_contexts,
            PromptKind::Clothing => &self.clothing_contexts,
        }
    }

    /// Template plus context rows for the given labels, `[len, M, token_dim]`.
    pub fn prompts(&self, ctx: &Ctx, kind: PromptKind, labels: &[u32]) -> Result<(&PromptTemplate, Tensor)> {
        let size = match kind {
            PromptKind::Identity => self.num_identities(),
            PromptKind::Clothing => self.num_clothes(),
        };
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= size) {
            return Err(Error::Lookup {
                what: match kind {
                    PromptKind::Identity => "identity prompt",
                    PromptKind::Clothing => "clothing prompt",
                },
                label: bad as usize,
                size,
            });
        }
        let all = ctx.t(self.param(kind));
        let idx = Tensor::new(labels, all.device())?;
        Ok((self.template(kind), all.index_select(&idx, 0)?))
    }

    pub fn identity_prompt(&self, ctx: &Ctx, label: u32) -> Result<(&PromptTemplate, Tensor)> {
        self.prompts(ctx, PromptKind::Identity, &[label])
    }

    pub fn clothing_prompt(&self, ctx: &Ctx, label: u32) -> Result<(&PromptTemplate, Tensor)> {
        self.prompts(ctx, PromptKind::Clothing, &[label])
    }

    /// Embeds prompts for `labels` (differentiable w.r.t. the bank when trainable).
    pub fn embed(&self, ctx: &Ctx, text: &TextEncoder, kind: PromptKind, labels: &[u32]) -> Result<Tensor> {
        let (tpl, contexts) = self.prompts(ctx, kind, labels)?;
        text.encode(ctx, tpl, &contexts)
    }

    /// Embeds every prompt without gradient. Results are cached and reused as
    /// long as neither the bank nor the text encoder changes.
    pub fn all_text_embeddings(&self, registry: &ParamRegistry, text: &TextEncoder) -> Result<TextEmbeddings> {
        let key = registry.fingerprint(GroupSet::of(&[Group::PromptBank, Group::TextEncoder]))?;
        if let Some(c) = self.cache.lock().expect("cache lock").as_ref() {
            if c.key == key {
                return Ok(TextEmbeddings {
                    identity: c.identity.clone(),
                    clothing: c.clothing.clone(),
                });
            }
        }
        let ctx = Ctx::inference();
        let ids: Vec<u32> = (0..self.num_identities() as u32).collect();
        let clo: Vec<u32> = (0..self.num_clothes() as u32).collect();
        let identity = self.embed(&ctx, text, PromptKind::Identity, &ids)?;
        let clothing = self.embed(&ctx, text, PromptKind::Clothing, &clo)?;
        *self.cache.lock().expect("cache lock") = Some(CachedEmbeddings {
            key,
            identity: identity.clone(),
            clothing: clothing.clone(),
        });
        Ok(TextEmbeddings { identity, clothing })
    }

    pub fn invalidate_cache(&self) {
        self.cache.lock().expect("cache lock").take();
    }
}
