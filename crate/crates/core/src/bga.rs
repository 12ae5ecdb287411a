//! Bio-guided attention: biological-region images, the channel-interaction
//! mask and the symmetric-KL distillation between backbone and BGA branch.

use candle_core::Tensor;
use ndarray::Array3;

use crate::cis::Crop;
use crate::data::mask::{select_parts, ParsingMask};
use crate::encoders::{ClassProbs, ClassifierHead, ImageEncoder};
use crate::error::{Error, Result};
use crate::losses;
use crate::nn::l2_normalize_guarded;
use crate::params::Ctx;

/// Tokens with a norm below this normalize to zero.
pub const NORM_EPS: f64 = 1e-12;

/// Keeps head, arm, leg and foot pixels.
pub fn bio_crop(image: &Array3<f32>, mask: &ParsingMask) -> Result<Crop> {
    let (out, kept) = select_parts(image, mask, |p| p.is_bio())?;
    if kept == 0 {
        log::warn!("empty biological region; falling back to the full image");
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

#[derive(Debug, Clone)]
pub struct Enhanced {
    /// `[B, D, D]`
    pub mask: Tensor,
    /// `[B, T, D]`
    pub tokens: Tensor,
}

/// `M = N(F_bio)ᵀ · N(F'_ori)` and `F_enh = F'_ori · M + F'_ori`, with `N`
/// the per-token ℓ2 normalization. Inputs are `[B, T, D]`.
pub fn bga_enhance(f_bio: &Tensor, f_ori_clone: &Tensor) -> Result<Enhanced> {
    if f_bio.dims() != f_ori_clone.dims() || f_bio.rank() != 3 {
        return Err(Error::Shape(format!(
            "bga inputs {:?} vs {:?}",
            f_bio.dims(),
            f_ori_clone.dims()
        )));
    }
    let nb = l2_normalize_guarded(f_bio, NORM_EPS)?;
    let no = l2_normalize_guarded(f_ori_clone, NORM_EPS)?;
    let mask = nb.transpose(1, 2)?.contiguous()?.matmul(&no)?;
    let tokens = (f_ori_clone.matmul(&mask)? + f_ori_clone)?;
    Ok(Enhanced { mask, tokens })
}

#[derive(Debug, Clone)]
pub struct Distilled {
    pub loss: Tensor,
    pub p_img: ClassProbs,
    pub p_bio: ClassProbs,
}

/// Classifies the enhanced class token with the bio head and the original
/// embedding with the identity head, then compares them by symmetric KL.
pub fn bga_distill(
    ctx: &Ctx,
    encoder: &ImageEncoder,
    identity_head: &ClassifierHead,
    bio_head: &ClassifierHead,
    f_enh: &Tensor,
    f_ori_embedding: &Tensor,
) -> Result<Distilled> {
    let enh_embedding = encoder.embed(ctx, f_enh)?;
    let p_bio = bio_head.classify(ctx, &enh_embedding)?;
    let p_img = identity_head.classify(ctx, f_ori_embedding)?;
    let loss = losses::bio_guided_loss(&p_img, &p_bio)?;
    Ok(Distilled { loss, p_img, p_bio })
}
