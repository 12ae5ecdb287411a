//! Human-part parsing masks.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum Part {
    Background = 0,
    Head = 1,
    Arms = 2,
    Legs = 3,
    Feet = 4,
    UpperClothes = 5,
    LowerClothes = 6,
}

impl Part {
    pub const ALL: [Part; 7] = [
        Part::Background,
        Part::Head,
        Part::Arms,
        Part::Legs,
        Part::Feet,
        Part::UpperClothes,
        Part::LowerClothes,
    ];

    pub fn from_id(id: u8) -> Option<Part> {
        Part::ALL.get(id as usize).copied()
    }

    pub fn name(&self) -> &'static str {
        match self {
            Part::Background => "background",
            Part::Head => "head",
            Part::Arms => "arms",
            Part::Legs => "legs",
            Part::Feet => "feet",
            Part::UpperClothes => "upper_clothes",
            Part::LowerClothes => "lower_clothes",
        }
    }

    pub fn is_clothing(&self) -> bool {
        matches!(self, Part::UpperClothes | Part::LowerClothes)
    }

    pub fn is_bio(&self) -> bool {
        matches!(self, Part::Head | Part::Arms | Part::Legs | Part::Feet)
    }
}

/// Maps part names to the integer ids stored in mask files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette(pub BTreeMap<String, u8>);

impl Default for Palette {
    fn default() -> Self {
        Palette(Part::ALL.iter().map(|p| (p.name().to_string(), *p as u8)).collect())
    }
}

impl Palette {
    pub fn load(path: &Path) -> Result<Self> {
        let p: Palette = serde_json::from_slice(&std::fs::read(path)?)?;
        for name in p.0.keys() {
            if !Part::ALL.iter().any(|part| part.name() == name) {
                return Err(Error::config(format!("palette names unknown part {name:?}")));
            }
        }
        Ok(p)
    }

    /// File id → canonical part.
    pub fn decoder(&self) -> BTreeMap<u8, Part> {
        self.0
            .iter()
            .filter_map(|(name, id)| Part::ALL.iter().find(|p| p.name() == name).map(|p| (*id, *p)))
            .collect()
    }
}

/// Per-pixel part labels, `[H, W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsingMask {
    pub labels: Array2<u8>,
}

impl ParsingMask {
    pub fn new(labels: Array2<u8>) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|&&v| Part::from_id(v).is_none()) {
            return Err(Error::config(format!("mask holds unknown part id {bad}")));
        }
        Ok(ParsingMask { labels })
    }

    pub fn filled(h: usize, w: usize, part: Part) -> Self {
        ParsingMask {
            labels: Array2::from_elem((h, w), part as u8),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn part(&self, y: usize, x: usize) -> Part {
        Part::from_id(self.labels[[y, x]]).expect("validated mask")
    }

    pub fn count(&self, pred: impl Fn(Part) -> bool) -> usize {
        self.labels
            .iter()
            .filter(|&&v| pred(Part::from_id(v).expect("validated mask")))
            .count()
    }

    /// Loads a single-channel indexed PNG, translating ids through `palette`.
    pub fn load_png(path: &Path, palette: &Palette) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        let dec = palette.decoder();
        let mut labels = Array2::<u8>::zeros((h as usize, w as usize));
        for (x, y, px) in img.enumerate_pixels() {
            let part = dec
                .get(&px.0[0])
                .ok_or_else(|| Error::config(format!("{}: id {} missing from palette", path.display(), px.0[0])))?;
            labels[[y as usize, x as usize]] = *part as u8;
        }
        Ok(ParsingMask { labels })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.dim();
        let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([self.labels[[y as usize, x as usize]]]));
        buf.save(path)?;
        Ok(())
    }
}

/// Keeps pixels whose part satisfies `keep`, zeroing the rest. Returns the
/// masked image and the number of kept pixels.
pub fn select_parts(image: &Array3<f32>, mask: &ParsingMask, keep: impl Fn(Part) -> bool) -> Result<(Array3<f32>, usize)> {
    let (c, h, w) = image.dim();
    if mask.dim() != (h, w) {
        return Err(Error::Shape(format!("mask {:?} vs image {h}x{w}", mask.dim())));
    }
    let mut out = Array3::<f32>::zeros((c, h, w));
    let mut kept = 0;
    for y in 0..h {
        for x in 0..w {
            if keep(mask.part(y, x)) {
                kept += 1;
                for ch in 0..c {
                    out[[ch, y, x]] = image[[ch, y, x]];
                }
            }
        }
    }
    Ok((out, kept))
}
