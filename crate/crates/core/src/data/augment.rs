//! Resizing, horizontal flips and random erasing.

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mask::ParsingMask;
use super::Sample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub height: usize,
    pub width: usize,
    pub flip_prob: f64,
    pub erase_prob: f64,
    pub erase_area: (f64, f64),
    pub erase_aspect: (f64, f64),
    pub erase_fill: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            height: 64,
            width: 32,
            flip_prob: 0.5,
            erase_prob: 0.5,
            erase_area: (0.02, 0.33),
            erase_aspect: (0.3, 3.33),
            erase_fill: 0.0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("augment size must be positive"));
        }
        if !prob(self.flip_prob) || !prob(self.erase_prob) {
            return Err(Error::config("augment probabilities must lie in [0, 1]"));
        }
        let (a0, a1) = self.erase_area;
        let (r0, r1) = self.erase_aspect;
        if !(0.0 < a0 && a0 <= a1 && a1 <= 1.0 && 0.0 < r0 && r0 <= r1) {
            return Err(Error::config("invalid erasing ranges"));
        }
        Ok(())
    }
}

pub fn resize_image(image: &Array3<f32>, h: usize, w: usize) -> Array3<f32> {
    let (_, ih, iw) = image.dim();
    if (ih, iw) == (h, w) {
        return image.clone();
    }
    let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
        ImageBuffer::from_fn(iw as u32, ih as u32, |x, y| {
            let p = |c| image[[c, y as usize, x as usize]];
            Rgb([p(0), p(1), p(2)])
        });
    let out = imageops::resize(&buf, w as u32, h as u32, FilterType::Triangle);
    Array3::from_shape_fn((3, h, w), |(c, y, x)| out.get_pixel(x as u32, y as u32).0[c].clamp(0.0, 1.0))
}

pub fn resize_mask(mask: &ParsingMask, h: usize, w: usize) -> ParsingMask {
    let (mh, mw) = mask.dim();
    if (mh, mw) == (h, w) {
        return mask.clone();
    }
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_fn(mw as u32, mh as u32, |x, y| Luma([mask.labels[[y as usize, x as usize]]]));
    let out = imageops::resize(&buf, w as u32, h as u32, FilterType::Nearest);
    ParsingMask {
        labels: Array2::from_shape_fn((h, w), |(y, x)| out.get_pixel(x as u32, y as u32).0[0]),
    }
}

pub fn flip_image(image: &Array3<f32>) -> Array3<f32> {
    let mut out = image.clone();
    out.invert_axis(ndarray::Axis(2));
    out.as_standard_layout().to_owned()
}

pub fn flip_mask(mask: &ParsingMask) -> ParsingMask {
    let mut labels = mask.labels.clone();
    labels.invert_axis(ndarray::Axis(1));
    ParsingMask {
        labels: labels.as_standard_layout().to_owned(),
    }
}

/// Rectangle `(y0, x0, h, w)` chosen for erasing.
pub type EraseBox = (usize, usize, usize, usize);

/// Draws an erasing rectangle; gives up after 100 attempts that do not fit.
pub fn sample_erase_box<R: Rng + ?Sized>(cfg: &AugmentConfig, h: usize, w: usize, rng: &mut R) -> Option<EraseBox> {
    let area = (h * w) as f64;
    for _ in 0..100 {
        let target = rng.random_range(cfg.erase_area.0..=cfg.erase_area.1) * area;
        let (l0, l1) = (cfg.erase_aspect.0.ln(), cfg.erase_aspect.1.ln());
        let aspect = rng.random_range(l0..=l1).exp();
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh > 0 && ew > 0 && eh < h && ew < w {
            let y0 = rng.random_range(0..=h - eh);
            let x0 = rng.random_range(0..=w - ew);
            return Some((y0, x0, eh, ew));
        }
    }
    None
}

pub fn erase(image: &mut Array3<f32>, (y0, x0, eh, ew): EraseBox, fill: f32) {
    let c = image.dim().0;
    for ch in 0..c {
        for y in y0..y0 + eh {
            for x in x0..x0 + ew {
                image[[ch, y, x]] = fill;
            }
        }
    }
}

/// What the training path did to one sample.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentTrace {
    pub flipped: bool,
    pub erased: Option<EraseBox>,
}

/// Resizes, and on the training path flips and erases. Masks are resized with
/// nearest neighbour and flipped alongside the image, never erased.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, train: bool, cfg: &AugmentConfig, rng: &mut R) -> (Sample, AugmentTrace) {
    let (h, w) = (cfg.height, cfg.width);
    let mut image = resize_image(&sample.image, h, w);
    let mut mask = sample.mask.as_ref().map(|m| resize_mask(m, h, w));
    let mut trace = AugmentTrace::default();
    if train {
        if rng.random_bool(cfg.flip_prob) {
            image = flip_image(&image);
            mask = mask.map(|m| flip_mask(&m));
            trace.flipped = true;
        }
        if rng.random_bool(cfg.erase_prob) {
            trace.erased = sample_erase_box(cfg, h, w, rng);
            if let Some(b) = trace.erased {
                erase(&mut image, b, cfg.erase_fill);
            }
        }
    }
    let out = Sample {
        image,
        mask,
        ..sample.clone()
    };
    (out, trace)
}
