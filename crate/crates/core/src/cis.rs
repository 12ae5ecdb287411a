//! Clothing information stripping: clothing-only images, the clothing
//! mapping head and the inputs of the clothing stripping loss.

use candle_core::Tensor;
use ndarray::Array3;

use crate::data::mask::{select_parts, ParsingMask, Part};
use crate::encoders::{ImageEncoder, ImageEncoding};
use crate::error::{Error, Result};
use crate::losses::{self, Composite};
use crate::nn::Block;
use crate::params::{Ctx, Group, Init};
use crate::prompt_bank::TextEmbeddings;

/// A masked image. `flagged` marks an empty region, in which case `image` is
/// the unmodified input.
#[derive(Debug, Clone)]
pub struct Crop {
    pub image: Array3<f32>,
    pub flagged: bool,
}

fn crop_or_fallback(image: &Array3<f32>, mask: &ParsingMask, keep: impl Fn(Part) -> bool, what: &str) -> Result<Crop> {
    let (out, kept) = select_parts(image, mask, keep)?;
    if kept == 0 {
        log::warn!("empty {what} region; falling back to the full image");
        return Ok(Crop {
            image: image.clone(),
            flagged: true,
        });
    }
    Ok(Crop {
        image: out,
        flagged: false,
    })
}

/// Keeps upper and lower clothing pixels, zeroing everything else.
pub fn clothing_crop(image: &Array3<f32>, mask: &ParsingMask) -> Result<Crop> {
    crop_or_fallback(image, mask, |p| p.is_clothing(), "clothing")
}

/// Final-block clone with its own parameters.
#[derive(Debug, Clone)]
pub struct MappingHead {
    pub block: Block,
}

impl MappingHead {
    pub fn new(init: &mut Init, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(MappingHead {
            block: Block::new(init, "mapping.block", Group::MappingHead, dim, heads, mlp_ratio)?,
        })
    }

    /// Initializes from the current values of `block`.
    pub fn copied_from(init: &mut Init, block: &Block) -> Result<Self> {
        Ok(MappingHead {
            block: Block::copy_of(init, "mapping.block", Group::MappingHead, block)?,
        })
    }

    /// Overwrites this head with the values of `block`.
    pub fn load_from(&self, block: &Block) -> Result<()> {
        for (dst, src) in self.block.params().into_iter().zip(block.params()) {
            dst.var.set(src.var.as_tensor())?;
        }
        Ok(())
    }
}

/// Clothing-mapping feature: the mapping head applied to the tokens entering
/// the encoder's final block, class token projected to the shared space.
pub fn clothing_mapping(ctx: &Ctx, encoder: &ImageEncoder, head: &MappingHead, penultimate: &Tensor) -> Result<Tensor> {
    let mapped = head.block.forward(ctx, penultimate, false)?;
    encoder.embed(ctx, &mapped)
}

#[derive(Debug, Clone)]
pub struct CisOutputs {
    pub f_ori: Tensor,
    pub f_clo: Tensor,
    pub f_img2clo: Tensor,
    /// Samples whose clothing region was non-empty.
    pub valid: Vec<bool>,
}

/// Encodes clothing crops and maps the original tokens. `ori` is the encoding
/// of the original images in the same batch order as `crops`.
pub fn cis_forward(ctx: &Ctx, encoder: &ImageEncoder, head: &MappingHead, ori: &ImageEncoding, crops: &[Crop]) -> Result<CisOutputs> {
    if crops.len() != ori.embedding.dim(0)? {
        return Err(Error::Shape("clothing crops do not match batch".into()));
    }
    let images: Vec<&Array3<f32>> = crops.iter().map(|c| &c.image).collect();
    let f_clo = encoder.encode(ctx, &images)?.embedding;
    let f_img2clo = clothing_mapping(ctx, encoder, head, &ori.penultimate.tokens)?;
    Ok(CisOutputs {
        f_ori: ori.embedding.clone(),
        f_clo,
        f_img2clo,
        valid: crops.iter().map(|c| !c.flagged).collect(),
    })
}

fn valid_rows(t: &Tensor, valid: &[bool]) -> Result<Option<Tensor>> {
    let idx: Vec<u32> = valid
        .iter()
        .enumerate()
        .filter(|(_, v)| **v)
        .map(|(i, _)| i as u32)
        .collect();
    if idx.is_empty() {
        return Ok(None);
    }
    Ok(Some(t.index_select(&Tensor::new(idx.as_slice(), t.device())?, 0)?))
}

/// Guide, spatial-consistency and decoupling terms. Flagged samples are left
/// out of the latter two.
pub fn cis_losses(out: &CisOutputs, text: &TextEmbeddings, y_i: &[u32], y_c: &[u32]) -> Result<Composite> {
    let guide = losses::guide_loss(&out.f_ori, &out.f_clo, &text.identity, &text.clothing, y_i, y_c)?;
    let zero = Tensor::zeros((), out.f_ori.dtype(), out.f_ori.device())?;
    let (sc, de) = match (
        valid_rows(&out.f_img2clo, &out.valid)?,
        valid_rows(&out.f_clo, &out.valid)?,
        valid_rows(&out.f_ori, &out.valid)?,
    ) {
        (Some(mapped), Some(clo), Some(orig)) => (
            losses::spatial_consistency(&mapped, &clo)?,
            losses::decoupling_loss(&orig, &mapped)?,
        ),
        _ => (zero.clone(), zero),
    };
    losses::clothing_stripping_loss(guide, sc, de)
}
