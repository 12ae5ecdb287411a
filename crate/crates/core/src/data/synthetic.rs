//! Procedural cloth-changing pedestrians with exact parsing masks.
//!
//! Identity fixes body geometry plus skin, hair and shoe colors. Each outfit
//! fixes upper/lower garment colors and pattern. Cameras fix the background
//! color and a horizontal viewpoint shear. Every image adds small pose jitter
//! and pixel noise, and optionally a rectangular occluder.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mask::{ParsingMask, Part};
use super::{Dataset, Sample, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_identities: usize,
    pub outfits_per_identity: usize,
    pub images_per_outfit: usize,
    pub cameras: usize,
    pub occlusion_prob: f64,
    pub seed: u64,
    pub image_size: (usize, usize),
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_identities: 10,
            outfits_per_identity: 3,
            images_per_outfit: 4,
            cameras: 2,
            occlusion_prob: 0.1,
            seed: 7,
            image_size: (64, 32),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0 || self.images_per_outfit == 0 || self.cameras == 0 || self.outfits_per_identity == 0 {
            return Err(Error::config("synthetic spec counts must be positive"));
        }
        if self.outfits_per_identity < 2 {
            return Err(Error::config(
                "a cloth-changing split needs at least 2 outfits per identity",
            ));
        }
        if self.images_per_outfit < 2 {
            return Err(Error::config("need at least 2 images per outfit to fill train and gallery"));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::config("occlusion_prob must lie in [0, 1]"));
        }
        let (h, w) = self.image_size;
        if h < 32 || w < 16 {
            return Err(Error::config("synthetic images must be at least 32x16"));
        }
        Ok(())
    }

    pub fn total_images(&self) -> usize {
        self.num_identities * self.outfits_per_identity * self.images_per_outfit
    }

    /// Global clothing label of (identity, outfit).
    pub fn clothing_label(&self, identity: usize, outfit: usize) -> u32 {
        (identity * self.outfits_per_identity + outfit) as u32
    }

    /// Last outfit of every identity is held out as query; the others
    /// alternate images between train (first half) and gallery.
    pub fn split_of(&self, outfit: usize, image: usize) -> Split {
        if outfit + 1 == self.outfits_per_identity {
            Split::Query
        } else if image < self.images_per_outfit / 2 {
            Split::Train
        } else {
            Split::Gallery
        }
    }
}

type Rgb = [f32; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityLook {
    pub skin: Rgb,
    pub hair: Rgb,
    pub shoes: Rgb,
    /// Fraction of the frame height occupied by the figure.
    pub height: f32,
    pub torso_half_width: f32,
    pub head_half_width: f32,
    pub leg_width: f32,
    /// Where trousers end, as a fraction of figure height.
    pub hem: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutfitLook {
    pub upper: Rgb,
    pub lower: Rgb,
    pub stripe: Rgb,
    /// 0 plain, 1 horizontal stripes, 2 vertical stripes.
    pub pattern: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraLook {
    pub background: Rgb,
    pub shear: f32,
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn color(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> Rgb {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

impl IdentityLook {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        IdentityLook {
            skin: color(rng, 0.15, 0.95),
            hair: color(rng, 0.1, 0.9),
            shoes: color(rng, 0.1, 0.9),
            height: rng.random_range(0.78..0.95),
            torso_half_width: rng.random_range(0.14..0.22),
            head_half_width: rng.random_range(0.09..0.15),
            leg_width: rng.random_range(0.07..0.11),
            hem: rng.random_range(0.66..0.78),
        }
    }
}

impl OutfitLook {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        OutfitLook {
            upper: color(rng, 0.05, 0.95),
            lower: color(rng, 0.05, 0.95),
            stripe: color(rng, 0.05, 0.95),
            pattern: rng.random_range(0..3),
        }
    }
}

impl CameraLook {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        CameraLook {
            background: color(rng, 0.3, 0.7),
            shear: rng.random_range(-0.12..0.12),
        }
    }
}

/// Per-image nuisance parameters.
#[derive(Debug, Clone)]
struct Pose {
    dx: f32,
    dy: f32,
    arm_swing: f32,
    occluder: Option<(usize, usize, usize, usize)>,
}

/// Part under figure-frame point `(u, v)`; `u` is horizontal offset from the
/// body axis in units of width, `v` is vertical position in figure height.
fn part_at(look: &IdentityLook, u: f32, v: f32, arm_swing: f32, aspect: f32) -> Part {
    if !(0.0..=1.0).contains(&v) {
        return Part::Background;
    }
    let au = u.abs();
    // head: ellipse centered at v = 0.09
    let hv = (v - 0.09) / 0.09;
    let hu = u / look.head_half_width;
    if hu * hu + hv * hv <= 1.0 {
        return Part::Head;
    }
    let tw = look.torso_half_width;
    if (0.18..0.50).contains(&v) && au <= tw {
        return Part::UpperClothes;
    }
    let arm_w = 0.07;
    let arm_off = arm_swing * (v - 0.19) / aspect;
    if (0.19..0.48).contains(&v) && ((u - arm_off) > tw && (u - arm_off) <= tw + arm_w || (-u - arm_off) > tw && (-u - arm_off) <= tw + arm_w) {
        return Part::Arms;
    }
    if (0.50..look.hem).contains(&v) && au <= tw * 0.9 {
        return Part::LowerClothes;
    }
    let gap = 0.03;
    let lw = look.leg_width;
    if (look.hem..0.94).contains(&v) && au >= gap && au <= gap + lw {
        return Part::Legs;
    }
    if (0.94..=1.0).contains(&v) && au >= gap * 0.5 && au <= gap + lw * 1.4 {
        return Part::Feet;
    }
    Part::Background
}

/// Renders one image and its mask.
fn render(
    id: &IdentityLook,
    outfit: &OutfitLook,
    cam: &CameraLook,
    pose: &Pose,
    size: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> (Array3<f32>, ParsingMask) {
    let (h, w) = size;
    let (hf, wf) = (h as f32, w as f32);
    let fig_h = id.height * (hf - 2.0);
    let top = (hf - fig_h) / 2.0 + pose.dy;
    let mut img = Array3::<f32>::zeros((3, h, w));
    let mut labels = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let yc = y as f32 + 0.5;
            let xs = x as f32 + 0.5 - cam.shear * (yc - hf / 2.0) - pose.dx;
            let u = (xs - wf / 2.0) / wf;
            let v = (yc - top) / fig_h;
            let mut part = part_at(id, u, v, pose.arm_swing, fig_h / wf);
            let occluded = pose
                .occluder
                .is_some_and(|(y0, y1, x0, x1)| y >= y0 && y < y1 && x >= x0 && x < x1);
            let base = if occluded {
                part = Part::Background;
                [0.2, 0.2, 0.2]
            } else {
                match part {
                    Part::Background => cam.background,
                    Part::Head => {
                        if v < 0.07 {
                            id.hair
                        } else {
                            id.skin
                        }
                    }
                    Part::Arms | Part::Legs => id.skin,
                    Part::Feet => id.shoes,
                    Part::UpperClothes => {
                        let stripe = match outfit.pattern {
                            1 => ((v * 40.0) as i32) % 2 == 0,
                            2 => (((u + 1.0) * 30.0) as i32) % 2 == 0,
                            _ => false,
                        };
                        if stripe {
                            outfit.stripe
                        } else {
                            outfit.upper
                        }
                    }
                    Part::LowerClothes => outfit.lower,
                }
            };
            labels[[y, x]] = part as u8;
            for c in 0..3 {
                let noise: f32 = rng.random_range(-0.03..0.03);
                img[[c, y, x]] = quantize(base[c] + noise);
            }
        }
    }
    (img, ParsingMask { labels })
}

/// Appearance records used to render a dataset.
#[derive(Debug, Clone)]
pub struct SyntheticLooks {
    pub identities: Vec<IdentityLook>,
    pub outfits: Vec<Vec<OutfitLook>>,
    pub cameras: Vec<CameraLook>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    Ok(generate_with_looks(spec)?.0)
}

pub fn generate_with_looks(spec: &SyntheticSpec) -> Result<(Dataset, SyntheticLooks)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cameras: Vec<CameraLook> = (0..spec.cameras).map(|_| CameraLook::draw(&mut rng)).collect();
    let identities: Vec<IdentityLook> = (0..spec.num_identities).map(|_| IdentityLook::draw(&mut rng)).collect();
    let outfits: Vec<Vec<OutfitLook>> = (0..spec.num_identities)
        .map(|_| (0..spec.outfits_per_identity).map(|_| OutfitLook::draw(&mut rng)).collect())
        .collect();
    let (h, w) = spec.image_size;
    let mut samples = Vec::with_capacity(spec.total_images());
    for (i, look) in identities.iter().enumerate() {
        for (o, outfit) in outfits[i].iter().enumerate() {
            for k in 0..spec.images_per_outfit {
                let camera = (k + o) % spec.cameras;
                let occluder = if rng.random_bool(spec.occlusion_prob) {
                    let oh = rng.random_range(h / 5..h / 2);
                    let ow = rng.random_range(w / 2..=w);
                    let y0 = rng.random_range(0..h - oh);
                    let x0 = rng.random_range(0..=w - ow);
                    Some((y0, y0 + oh, x0, x0 + ow))
                } else {
                    None
                };
                let pose = Pose {
                    dx: rng.random_range(-2.0..2.0),
                    dy: rng.random_range(-1.0..1.0),
                    arm_swing: rng.random_range(-0.15..0.15),
                    occluder,
                };
                let (image, mask) = render(look, outfit, &cameras[camera], &pose, (h, w), &mut rng);
                samples.push(Sample {
                    image,
                    identity: i as u32,
                    clothing: spec.clothing_label(i, o),
                    camera: camera as u32,
                    mask: Some(mask),
                    split: spec.split_of(o, k),
                });
            }
        }
    }
    let ds = Dataset {
        samples,
        num_identities: spec.num_identities,
        num_clothes: spec.num_identities * spec.outfits_per_identity,
    };
    ds.validate()?;
    Ok((
        ds,
        SyntheticLooks {
            identities,
            outfits,
            cameras,
        },
    ))
}
