//! Patch-transformer image encoder, prompt-aware text encoder and classifier
//! heads, all projecting into one shared embedding space.

use candle_core::{DType, Device, IndexOp, Tensor};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Block, LayerNorm, Linear};
use crate::params::{Ctx, Group, Init, Param};

/// Minimum class probability before any logarithm.
pub const EPS_PROB: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// (height, width) in pixels.
    pub image_size: (usize, usize),
    pub patch_size: usize,
    /// Equal to `patch_size` for tiling; smaller for overlapping patches.
    pub patch_stride: usize,
    pub depth: usize,
    pub text_depth: usize,
    pub token_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub shared_dim: usize,
    pub max_text_len: usize,
    pub num_identities: usize,
    pub num_clothes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: (64, 32),
            patch_size: 8,
            patch_stride: 8,
            depth: 4,
            text_depth: 2,
            token_dim: 64,
            heads: 4,
            mlp_ratio: 4,
            shared_dim: 32,
            max_text_len: 16,
            num_identities: 10,
            num_clothes: 30,
        }
    }
}

impl EncoderConfig {
    /// Window positions along one axis.
    fn positions(len: usize, patch: usize, stride: usize) -> Result<usize> {
        if patch == 0 || stride == 0 || stride > patch {
            return Err(Error::config(format!(
                "invalid patch geometry: patch {patch}, stride {stride}"
            )));
        }
        if len < patch || (len - patch) % stride != 0 {
            return Err(Error::config(format!(
                "side {len} not tiled by patch {patch} at stride {stride}"
            )));
        }
        Ok(1 + (len - patch) / stride)
    }

    pub fn grid(&self) -> Result<(usize, usize)> {
        let (h, w) = self.image_size;
        Ok((
            Self::positions(h, self.patch_size, self.patch_stride)?,
            Self::positions(w, self.patch_size, self.patch_stride)?,
        ))
    }

    /// Number of patch tokens N (excluding the class token).
    pub fn num_patches(&self) -> Result<usize> {
        let (gh, gw) = self.grid()?;
        Ok(gh * gw)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_patches()?;
        if n < 4 || n % 4 != 0 {
            return Err(Error::config(format!("patch count {n} must be >= 4 and divisible by 4")));
        }
        if self.shared_dim == 0 || self.token_dim == 0 {
            return Err(Error::config("token_dim and shared_dim must be positive"));
        }
        if self.heads == 0 || self.token_dim % self.heads != 0 {
            return Err(Error::config("token_dim must be divisible by heads"));
        }
        if self.depth == 0 || self.text_depth == 0 {
            return Err(Error::config("encoder depth must be positive"));
        }
        if self.num_identities == 0 || self.num_clothes == 0 {
            return Err(Error::config("label spaces must be non-empty"));
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Image,
    Text,
    Bio,
    Clothing,
}

/// Batched token sequences, `[B, 1 + N, token_dim]`; position 0 is the class token.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub provenance: Provenance,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.dim(1).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self) -> usize {
        self.tokens.dim(0).unwrap_or(0)
    }
}

/// Per-channel input normalization applied before patch embedding.
pub const PIXEL_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const PIXEL_STD: [f32; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

/// Extracts every `patch × patch` window at `stride`, row-major over window
/// positions, each flattened channel-major. Shape `[N, 3·P·P]`.
pub fn extract_patches(image: &Array3<f32>, cfg: &EncoderConfig) -> Result<Vec<f32>> {
    let (c, h, w) = image.dim();
    if c != 3 || (h, w) != cfg.image_size {
        return Err(Error::config(format!(
            "image is {c}x{h}x{w}, encoder expects 3x{}x{}",
            cfg.image_size.0, cfg.image_size.1
        )));
    }
    let (gh, gw) = cfg.grid()?;
    let (p, s) = (cfg.patch_size, cfg.patch_stride);
    let mut out = Vec::with_capacity(gh * gw * cfg.patch_len());
    for gy in 0..gh {
        for gx in 0..gw {
            for ch in 0..3 {
                for dy in 0..p {
                    for dx in 0..p {
                        out.push(image[[ch, gy * s + dy, gx * s + dx]]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Image encoder outputs for a batch.
#[derive(Debug, Clone)]
pub struct ImageEncoding {
    /// Input of the final block.
    pub penultimate: TokenSequence,
    /// Output of the final block.
    pub tokens: TokenSequence,
    /// Class token projected to the shared space, `[B, shared_dim]`.
    pub embedding: Tensor,
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub cfg: EncoderConfig,
    pub patch_embed: Linear,
    pub cls: Param,
    pub pos: Param,
    pub ln_pre: LayerNorm,
    pub blocks: Vec<Block>,
    pub ln_post: LayerNorm,
    pub proj: Linear,
}

impl ImageEncoder {
    pub fn new(init: &mut Init, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let g = Group::ImageEncoder;
        let d = cfg.token_dim;
        let n = cfg.num_patches()?;
        let patch_embed = Linear::new(init, "image.patch_embed", g, cfg.patch_len(), d, true)?;
        let cls = init.trunc_normal("image.cls", g, &[1, 1, d], 0.02)?;
        let pos = init.trunc_normal("image.pos", g, &[1, 1 + n, d], 0.02)?;
        let ln_pre = LayerNorm::new(init, "image.ln_pre", g, d)?;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(init, &format!("image.block{i}"), g, d, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let ln_post = LayerNorm::new(init, "image.ln_post", g, d)?;
        let proj = Linear::new(init, "image.proj", g, d, cfg.shared_dim, false)?;
        Ok(ImageEncoder {
            cfg: cfg.clone(),
            patch_embed,
            cls,
            pos,
            ln_pre,
            blocks,
            ln_post,
            proj,
        })
    }

    fn device(&self) -> &Device {
        self.cls.var.device()
    }

    fn dtype(&self) -> DType {
        self.cls.var.dtype()
    }

    /// Class token followed by embedded patches, positional offsets added.
    pub fn patchify(&self, ctx: &Ctx, images: &[&Array3<f32>]) -> Result<TokenSequence> {
        if images.is_empty() {
            return Err(Error::Shape("empty image batch".into()));
        }
        let n = self.cfg.num_patches()?;
        let mut flat = Vec::with_capacity(images.len() * n * self.cfg.patch_len());
        for img in images {
            flat.extend(extract_patches(img, &self.cfg)?);
        }
        let b = images.len();
        let per = self.cfg.patch_size * self.cfg.patch_size;
        let len = self.cfg.patch_len();
        for (j, v) in flat.iter_mut().enumerate() {
            let ch = (j % len) / per;
            *v = (*v - PIXEL_MEAN[ch]) / PIXEL_STD[ch];
        }
        let patches = Tensor::from_vec(flat, (b, n, len), self.device())?.to_dtype(self.dtype())?;
        let embedded = self.patch_embed.forward(ctx, &patches)?;
        let cls = ctx.t(&self.cls).broadcast_as((b, 1, self.cfg.token_dim))?;
        let tokens = Tensor::cat(&[&cls, &embedded], 1)?.broadcast_add(&ctx.t(&self.pos))?;
        Ok(TokenSequence {
            tokens,
            provenance: Provenance::Image,
        })
    }

    pub fn encode(&self, ctx: &Ctx, images: &[&Array3<f32>]) -> Result<ImageEncoding> {
        let seq = self.patchify(ctx, images)?;
        let mut x = self.ln_pre.forward(ctx, &seq.tokens)?;
        let last = self.blocks.len() - 1;
        for (i, blk) in self.blocks[..last].iter().enumerate() {
            x = blk.forward(ctx, &x, false)?;
            if ctx.check_finite && !nn::all_finite(&x)? {
                return Err(Error::Numeric { stage: "image encoder", layer: i });
            }
        }
        let penultimate = x.clone();
        let out = self.blocks[last].forward(ctx, &x, false)?;
        if ctx.check_finite && !nn::all_finite(&out)? {
            return Err(Error::Numeric { stage: "image encoder", layer: last });
        }
        let embedding = self.embed(ctx, &out)?;
        Ok(ImageEncoding {
            penultimate: TokenSequence {
                tokens: penultimate,
                provenance: seq.provenance,
            },
            tokens: TokenSequence {
                tokens: out,
                provenance: seq.provenance,
            },
            embedding,
        })
    }

    /// Runs every block and returns the hidden state after each one.
    pub fn trace(&self, ctx: &Ctx, images: &[&Array3<f32>]) -> Result<Vec<Tensor>> {
        let seq = self.patchify(ctx, images)?;
        let mut x = self.ln_pre.forward(ctx, &seq.tokens)?;
        let mut states = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            x = blk.forward(ctx, &x, false)?;
            states.push(x.clone());
        }
        Ok(states)
    }

    /// Applies only the final block; sequence length is arbitrary.
    pub fn refine_last_block(&self, ctx: &Ctx, tokens: &Tensor) -> Result<Tensor> {
        self.blocks.last().expect("depth >= 1").forward(ctx, tokens, false)
    }

    /// Class token of `tokens` through the post-norm and shared projection.
    pub fn embed(&self, ctx: &Ctx, tokens: &Tensor) -> Result<Tensor> {
        let cls = nn::class_token(tokens)?;
        self.proj.forward(ctx, &self.ln_post.forward(ctx, &cls)?)
    }

    pub fn last_block(&self) -> &Block {
        self.blocks.last().expect("depth >= 1")
    }
}

/// Whitespace tokenizer over a closed template vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab;

impl Vocab {
    pub const PAD: u32 = 0;
    pub const SOS: u32 = 1;
    pub const EOS: u32 = 2;
    pub const SLOT: u32 = 3;
    pub const WORDS: [&'static str; 9] = ["<pad>", "<sos>", "<eos>", "<slot>", "a", "photo", "of", "person.", "clothes."];

    pub fn size() -> usize {
        Self::WORDS.len()
    }

    pub fn id(word: &str) -> Result<u32> {
        let w = word.to_lowercase();
        Self::WORDS
            .iter()
            .position(|v| *v == w)
            .map(|i| i as u32)
            .ok_or_else(|| Error::config(format!("word {word:?} not in template vocabulary")))
    }

    pub fn tokenize(text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(Self::id).collect()
    }
}

/// Token ids of a prompt template with the learnable slot positions marked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    /// Padded to `max_text_len`; slot positions hold [`Vocab::SLOT`].
    pub ids: Vec<u32>,
    pub slots: Vec<usize>,
    pub eos: usize,
}

impl PromptTemplate {
    /// Builds `<sos> words... <eos>` where each `X` word becomes a slot.
    pub fn from_words(words: &[&str], max_len: usize) -> Result<Self> {
        let mut ids = vec![Vocab::SOS];
        let mut slots = Vec::new();
        for w in words {
            if *w == "X" {
                slots.push(ids.len());
                ids.push(Vocab::SLOT);
            } else {
                ids.push(Vocab::id(w)?);
            }
        }
        let eos = ids.len();
        ids.push(Vocab::EOS);
        if ids.len() > max_len {
            return Err(Error::config(format!("template of {} tokens exceeds max_text_len {max_len}", ids.len())));
        }
        ids.resize(max_len, Vocab::PAD);
        Ok(PromptTemplate { ids, slots, eos })
    }

    /// Non-special words, in order.
    pub fn words(&self) -> Vec<&'static str> {
        self.ids[..self.eos]
            .iter()
            .filter(|&&id| id != Vocab::SOS && id != Vocab::SLOT)
            .map(|&id| Vocab::WORDS[id as usize])
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub token_embed: Param,
    pub pos: Param,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
    pub proj: Linear,
    pub max_len: usize,
    pub dim: usize,
}

impl TextEncoder {
    pub fn new(init: &mut Init, cfg: &EncoderConfig) -> Result<Self> {
        let g = Group::TextEncoder;
        let d = cfg.token_dim;
        Ok(TextEncoder {
            token_embed: init.trunc_normal("text.token_embed", g, &[Vocab::size(), d], 0.02)?,
            pos: init.trunc_normal("text.pos", g, &[1, cfg.max_text_len, d], 0.01)?,
            blocks: (0..cfg.text_depth)
                .map(|i| Block::new(init, &format!("text.block{i}"), g, d, cfg.heads, cfg.mlp_ratio))
                .collect::<Result<Vec<_>>>()?,
            ln_final: LayerNorm::new(init, "text.ln_final", g, d)?,
            proj: Linear::new(init, "text.proj", g, d, cfg.shared_dim, false)?,
            max_len: cfg.max_text_len,
            dim: d,
        })
    }

    /// Encodes one template for `K` context sets. `contexts`: `[K, M, token_dim]`
    /// with `M` equal to the template's slot count. Returns `[K, shared_dim]`.
    pub fn encode(&self, ctx: &Ctx, template: &PromptTemplate, contexts: &Tensor) -> Result<Tensor> {
        let (k, m, d) = contexts.dims3()?;
        if m != template.slots.len() {
            return Err(Error::config(format!(
                "context length {m} does not match template slots {}",
                template.slots.len()
            )));
        }
        if d != self.dim || template.ids.len() != self.max_len {
            return Err(Error::Shape("text context dims".into()));
        }
        let ids = Tensor::new(template.ids.as_slice(), contexts.device())?;
        let embedded = ctx.t(&self.token_embed).index_select(&ids, 0)?; // [L, D]
        // Splice context rows into the template wherever slots appear.
        let mut pieces: Vec<Tensor> = Vec::new();
        let mut cursor = 0usize;
        let mut slot_idx = 0usize;
        while cursor < self.max_len {
            if slot_idx < m && template.slots[slot_idx] == cursor {
                let mut run = 1;
                while slot_idx + run < m && template.slots[slot_idx + run] == cursor + run {
                    run += 1;
                }
                pieces.push(contexts.narrow(1, slot_idx, run)?);
                slot_idx += run;
                cursor += run;
            } else {
                let mut end = cursor + 1;
                while end < self.max_len && !(slot_idx < m && template.slots[slot_idx] == end) {
                    end += 1;
                }
                let fixed = embedded.narrow(0, cursor, end - cursor)?.unsqueeze(0)?;
                pieces.push(fixed.broadcast_as((k, end - cursor, d))?.contiguous()?);
                cursor = end;
            }
        }
        let mut x = Tensor::cat(&pieces, 1)?.broadcast_add(&ctx.t(&self.pos))?;
        for (i, blk) in self.blocks.iter().enumerate() {
            x = blk.forward(ctx, &x, true)?;
            if ctx.check_finite && !nn::all_finite(&x)? {
                return Err(Error::Numeric { stage: "text encoder", layer: i });
            }
        }
        let eos = x.i((.., template.eos, ..))?.contiguous()?;
        self.proj.forward(ctx, &self.ln_final.forward(ctx, &eos)?)
    }
}

/// Softmax probabilities, `[B, num_classes]`, clamped to at least [`EPS_PROB`].
#[derive(Debug, Clone)]
pub struct ClassProbs(pub Tensor);

impl ClassProbs {
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let p = nn::softmax_last(logits)?.maximum(EPS_PROB)?;
        let p = p.broadcast_div(&p.sum_keepdim(candle_core::D::Minus1)?)?;
        Ok(ClassProbs(p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Identity,
    Bio,
}

#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub linear: Linear,
}

impl ClassifierHead {
    pub fn new(init: &mut Init, name: &str, in_dim: usize, classes: usize) -> Result<Self> {
        Ok(ClassifierHead {
            linear: Linear::new(init, name, Group::Heads, in_dim, classes, true)?,
        })
    }

    pub fn logits(&self, ctx: &Ctx, e: &Tensor) -> Result<Tensor> {
        self.linear.forward(ctx, e)
    }

    pub fn classify(&self, ctx: &Ctx, e: &Tensor) -> Result<ClassProbs> {
        ClassProbs::from_logits(&self.logits(ctx, e)?)
    }

    pub fn num_classes(&self) -> usize {
        self.linear.weight.var.dim(1).unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{GroupSet, ParamRegistry};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: &EncoderConfig) -> Result<(ImageEncoder, TextEncoder, ParamRegistry)> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut reg = ParamRegistry::default();
        let mut init = Init {
            rng: &mut rng,
            dtype: DType::F32,
            device: Device::Cpu,
            registry: &mut reg,
        };
        let img = ImageEncoder::new(&mut init, cfg)?;
        let txt = TextEncoder::new(&mut init, cfg)?;
        Ok((img, txt, reg))
    }

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            image_size: (32, 32),
            patch_size: 16,
            patch_stride: 16,
            depth: 2,
            token_dim: 16,
            heads: 2,
            shared_dim: 8,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn patch_counts() -> Result<()> {
        let mut cfg = small_cfg();
        assert_eq!(cfg.num_patches()?, 4);
        cfg.image_size = (256, 128);
        assert_eq!(cfg.num_patches()?, 128);
        cfg.image_size = (32, 32);
        cfg.patch_stride = 8;
        assert_eq!(cfg.num_patches()?, 9);
        cfg.image_size = (30, 32);
        assert!(cfg.num_patches().is_err());
        Ok(())
    }

    #[test]
    fn patch_count_matches_enumeration() {
        for side in [16usize, 20, 24, 32, 40] {
            for p in [2usize, 4, 8] {
                for s in 1..=p {
                    let mut positions = 0;
                    let mut start = 0;
                    while start + p <= side {
                        positions += 1;
                        start += s;
                    }
                    let tiles = (start - s + p) == side;
                    match EncoderConfig::positions(side, p, s) {
                        Ok(k) => assert_eq!(k, positions),
                        Err(_) => assert!(!tiles, "side {side} p {p} s {s}"),
                    }
                }
            }
        }
    }

    #[test]
    fn patchify_sequence_lengths() -> Result<()> {
        let cfg = small_cfg();
        let (img, _, _) = build(&cfg)?;
        let x = Array3::<f32>::zeros((3, 32, 32));
        let seq = img.patchify(&Ctx::inference(), &[&x])?;
        assert_eq!(seq.tokens.dims(), &[1, 5, 16]);

        let ov = EncoderConfig {
            patch_stride: 8,
            ..cfg.clone()
        };
        // 9 patches fails the divisibility rule for grouping.
        assert!(ov.validate().is_err());
        let bad = Array3::<f32>::zeros((3, 16, 32));
        assert!(matches!(img.patchify(&Ctx::inference(), &[&bad]), Err(Error::Config(_))));
        Ok(())
    }

    #[test]
    fn encode_image_is_deterministic_and_sensitive() -> Result<()> {
        let cfg = small_cfg();
        let (img, _, _) = build(&cfg)?;
        let ctx = Ctx::inference();
        let zero = Array3::<f32>::zeros((3, 32, 32));
        let e0 = img.encode(&ctx, &[&zero])?.embedding;
        assert_eq!(e0.dims(), &[1, 8]);
        assert!(nn::all_finite(&e0)?);
        let e1 = img.encode(&ctx, &[&zero])?.embedding;
        assert_eq!(e0.to_vec2::<f32>()?, e1.to_vec2::<f32>()?);
        let mut poked = zero.clone();
        poked[[1, 5, 7]] = 1.0;
        let e2 = img.encode(&ctx, &[&poked])?.embedding;
        assert_ne!(e0.to_vec2::<f32>()?, e2.to_vec2::<f32>()?);
        Ok(())
    }

    #[test]
    fn refine_matches_trace() -> Result<()> {
        let cfg = small_cfg();
        let (img, _, _) = build(&cfg)?;
        let ctx = Ctx::inference();
        let mut x = Array3::<f32>::zeros((3, 32, 32));
        x.iter_mut().enumerate().for_each(|(i, v)| *v = (i % 7) as f32 / 7.0);
        let states = img.trace(&ctx, &[&x])?;
        let refined = img.refine_last_block(&ctx, &states[states.len() - 2])?;
        assert_eq!(refined.dims(), &[1, 5, 16]);
        assert_eq!(
            refined.flatten_all()?.to_vec1::<f32>()?,
            states.last().unwrap().flatten_all()?.to_vec1::<f32>()?
        );
        // variable length input
        let short = states[0].narrow(1, 0, 2)?;
        assert_eq!(img.refine_last_block(&ctx, &short)?.dims(), &[1, 2, 16]);
        Ok(())
    }

    #[test]
    fn projection_is_linear() -> Result<()> {
        let cfg = small_cfg();
        let (img, _, _) = build(&cfg)?;
        let ctx = Ctx::inference();
        let a = Tensor::randn(0f32, 1., (3, 16), &Device::Cpu)?;
        let b = Tensor::randn(0f32, 1., (3, 16), &Device::Cpu)?;
        let lhs = img.proj.forward(&ctx, &(&a + &b)?)?;
        let rhs = (img.proj.forward(&ctx, &a)? + img.proj.forward(&ctx, &b)?)?;
        let diff = (lhs - rhs)?.abs()?.max_all()?.to_scalar::<f32>()?;
        assert!(diff < 1e-5);
        Ok(())
    }

    #[test]
    fn text_template_and_context() -> Result<()> {
        let cfg = small_cfg();
        let (_, txt, _) = build(&cfg)?;
        let t = PromptTemplate::from_words(&["A", "photo", "of", "a", "X", "X", "X", "X", "person."], 16)?;
        assert_eq!(t.slots, vec![5, 6, 7, 8]);
        assert_eq!(t.words().len(), 5);
        let ctx = Ctx::inference();
        let zero = Tensor::zeros((1, 4, 16), DType::F32, &Device::Cpu)?;
        let e0 = txt.encode(&ctx, &t, &zero)?;
        assert_eq!(e0.dims(), &[1, 8]);
        assert!(nn::all_finite(&e0)?);
        let other = Tensor::ones((1, 4, 16), DType::F32, &Device::Cpu)?;
        let e1 = txt.encode(&ctx, &t, &other)?;
        assert_ne!(e0.to_vec2::<f32>()?, e1.to_vec2::<f32>()?);
        let wrong = Tensor::zeros((1, 3, 16), DType::F32, &Device::Cpu)?;
        assert!(matches!(txt.encode(&ctx, &t, &wrong), Err(Error::Config(_))));
        Ok(())
    }

    #[test]
    fn fully_zero_text_is_finite() -> Result<()> {
        let cfg = small_cfg();
        let (_, txt, reg) = build(&cfg)?;
        for p in reg.in_groups(GroupSet::of(&[Group::TextEncoder])) {
            if p.name.contains("token_embed") {
                p.var.set(&p.var.zeros_like()?)?;
            }
        }
        let t = PromptTemplate::from_words(&["A", "photo", "of", "a", "X", "X", "X", "X", "person."], 16)?;
        let zero = Tensor::zeros((1, 4, 16), DType::F32, &Device::Cpu)?;
        let e = txt.encode(&Ctx::inference(), &t, &zero)?;
        assert!(nn::all_finite(&e)?);
        Ok(())
    }

    #[test]
    fn classify_properties() -> Result<()> {
        let dev = Device::Cpu;
        let p = ClassProbs::from_logits(&Tensor::new(&[[2f64.ln(), 0.0]], &dev)?)?;
        let v = p.0.to_vec2::<f64>()?;
        assert!((v[0][0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((v[0][1] - 1.0 / 3.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut reg = ParamRegistry::default();
        let mut init = Init {
            rng: &mut rng,
            dtype: DType::F32,
            device: dev.clone(),
            registry: &mut reg,
        };
        let head = ClassifierHead::new(&mut init, "h", 8, 5)?;
        head.linear.weight.var.set(&head.linear.weight.var.zeros_like()?)?;
        let e = Tensor::randn(0f32, 1., (100, 8), &dev)?;
        let probs = head.classify(&Ctx::inference(), &e)?.0.to_vec2::<f32>()?;
        for row in &probs {
            for v in row {
                assert!((v - 0.2).abs() < 1e-6);
            }
        }
        head.linear.weight.var.set(&Tensor::randn(0f32, 3., (8, 5), &dev)?)?;
        let probs = head.classify(&Ctx::inference(), &e)?.0.to_vec2::<f32>()?;
        for row in &probs {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v as f64 >= EPS_PROB * 0.99));
        }
        Ok(())
    }
}
