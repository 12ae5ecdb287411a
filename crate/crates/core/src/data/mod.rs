//! Samples, datasets, synthetic generation, directory ingestion,
//! augmentation and identity-balanced batching.

pub mod augment;
pub mod ingest;
pub mod mask;
pub mod sampler;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
pub use mask::{Palette, ParsingMask, Part};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Debug, Clone)]
pub struct Sample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Array3<f32>,
    pub identity: u32,
    pub clothing: u32,
    pub camera: u32,
    /// `None` when no parsing mask was available; such samples skip the
    /// mask-dependent terms.
    pub mask: Option<ParsingMask>,
    pub split: Split,
}

impl Sample {
    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.image.dim();
        (h, w)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_identities: usize,
    pub num_clothes: usize,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Checks label ranges, mask geometry and clothing-label injectivity.
    pub fn validate(&self) -> Result<()> {
        let mut owner: BTreeMap<u32, u32> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            if s.identity as usize >= self.num_identities || s.clothing as usize >= self.num_clothes {
                return Err(Error::config(format!("sample {i} has labels outside the label spaces")));
            }
            if let Some(m) = &s.mask {
                if m.dim() != s.dims() {
                    return Err(Error::config(format!("sample {i}: mask dims differ from image")));
                }
            }
            if let Some(prev) = owner.insert(s.clothing, s.identity) {
                if prev != s.identity {
                    return Err(Error::config(format!(
                        "clothing label {} shared by identities {prev} and {}",
                        s.clothing, s.identity
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn identities(&self, split: Split) -> BTreeSet<u32> {
        self.samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| s.identity)
            .collect()
    }

    /// SHA-256 over every image, mask and label in order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.samples {
            for v in s.image.iter() {
                h.update(v.to_le_bytes());
            }
            if let Some(m) = &s.mask {
                h.update(m.labels.as_slice().unwrap_or(&m.labels.iter().copied().collect::<Vec<_>>()));
            }
            h.update(s.identity.to_le_bytes());
            h.update(s.clothing.to_le_bytes());
            h.update(s.camera.to_le_bytes());
            h.update([s.split as u8]);
        }
        hex::encode(h.finalize())
    }
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub identity: u32,
    pub clothing: u32,
    pub camera: u32,
    pub split: Split,
    pub mask_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub image_size: (usize, usize),
    pub num_identities: usize,
    pub num_clothes: usize,
    pub samples: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PALETTE_FILE: &str = "palette.json";

pub fn load_png_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

pub fn save_png_rgb(image: &Array3<f32>, path: &Path) -> Result<()> {
    let (_, h, w) = image.dim();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (image[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    buf.save(path)?;
    Ok(())
}

impl Dataset {
    /// Writes images, masks, palette and manifest under `root`.
    pub fn save(&self, root: &Path) -> Result<Manifest> {
        fs::create_dir_all(root.join("images"))?;
        fs::create_dir_all(root.join("masks"))?;
        let mut entries = Vec::with_capacity(self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            let stem = format!("{:04}_{:04}_c{}_{:05}", s.identity, s.clothing, s.camera, i);
            let path = format!("images/{stem}.png");
            save_png_rgb(&s.image, &root.join(&path))?;
            let mask_path = match &s.mask {
                Some(m) => {
                    let p = format!("masks/{stem}.png");
                    m.save_png(&root.join(&p))?;
                    Some(p)
                }
                None => None,
            };
            entries.push(ManifestEntry {
                path,
                identity: s.identity,
                clothing: s.clothing,
                camera: s.camera,
                split: s.split,
                mask_path,
            });
        }
        let image_size = self.samples.first().map(|s| s.dims()).unwrap_or((0, 0));
        let manifest = Manifest {
            image_size,
            num_identities: self.num_identities,
            num_clothes: self.num_clothes,
            samples: entries,
        };
        fs::write(root.join(PALETTE_FILE), serde_json::to_vec_pretty(&Palette::default())?)?;
        fs::write(root.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }

    /// Reads a dataset written by [`Dataset::save`] or any tree with a manifest.
    pub fn load(root: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(root.join(MANIFEST_FILE))?)?;
        let palette = match root.join(PALETTE_FILE) {
            p if p.exists() => Palette::load(&p)?,
            _ => Palette::default(),
        };
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for e in &manifest.samples {
            let image = load_png_rgb(&root.join(&e.path))?;
            let mask = match &e.mask_path {
                Some(p) => Some(ParsingMask::load_png(&root.join(p), &palette)?),
                None => None,
            };
            samples.push(Sample {
                image,
                identity: e.identity,
                clothing: e.clothing,
                camera: e.camera,
                mask,
                split: e.split,
            });
        }
        let ds = Dataset {
            samples,
            num_identities: manifest.num_identities,
            num_clothes: manifest.num_clothes,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Hash of a manifest file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}
