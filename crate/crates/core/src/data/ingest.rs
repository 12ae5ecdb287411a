//! Reads real-world style directory trees.
//!
//! Two filename grammars are understood. Split directories are named
//! `train`, `query` and `gallery`.
//!
//! `ltcc_like`: `<split>/<id>_<outfit>_c<cam>_<frame>.png`, all fields
//! decimal integers.
//!
//! `prcc_like`: `<split>/<id>/<cam>_<frame>.png` with `cam` one of `A`, `B`,
//! `C`. Cameras `A` and `B` see the same outfit, camera `C` a different one.
//!
//! A parsing mask may sit next to an image as `<stem>.mask.png`, its values
//! decoded through `palette.json` at the root (default palette otherwise).
//! Identities are re-indexed densely in ascending order of their raw id and
//! clothing labels in ascending `(raw id, outfit)` order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::mask::{Palette, ParsingMask};
use super::{load_png_rgb, Dataset, Sample, Split, PALETTE_FILE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    PrccLike,
    LtccLike,
}

impl std::str::FromStr for Layout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prcc_like" => Ok(Layout::PrccLike),
            "ltcc_like" => Ok(Layout::LtccLike),
            other => Err(Error::config(format!("unknown layout {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub parsed: usize,
    pub with_mask: usize,
    pub skipped: Vec<Skipped>,
    /// Raw identity → dense label.
    pub identity_map: BTreeMap<u32, u32>,
    /// `"<raw id>/<outfit>"` → dense clothing label.
    pub clothing_map: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Parsed {
    id: u32,
    outfit: u32,
    camera: u32,
}

fn parse_ltcc(rel: &[&str]) -> std::result::Result<Parsed, String> {
    let [name] = rel else {
        return Err("expected <split>/<file>".into());
    };
    let stem = name.strip_suffix(".png").ok_or("not a .png file")?;
    let fields: Vec<&str> = stem.split('_').collect();
    let [id, outfit, cam, frame] = fields.as_slice() else {
        return Err("expected <id>_<outfit>_c<cam>_<frame>".into());
    };
    let num = |s: &str, what: &str| s.parse::<u32>().map_err(|_| format!("bad {what} field {s:?}"));
    let cam = cam.strip_prefix('c').ok_or("camera field must start with 'c'")?;
    num(frame, "frame")?;
    Ok(Parsed {
        id: num(id, "id")?,
        outfit: num(outfit, "outfit")?,
        camera: num(cam, "camera")?,
    })
}

fn parse_prcc(rel: &[&str]) -> std::result::Result<Parsed, String> {
    let [id, name] = rel else {
        return Err("expected <split>/<id>/<file>".into());
    };
    let id = id.parse::<u32>().map_err(|_| format!("bad id directory {id:?}"))?;
    let stem = name.strip_suffix(".png").ok_or("not a .png file")?;
    let (cam, frame) = stem.split_once('_').ok_or("expected <cam>_<frame>")?;
    frame.parse::<u32>().map_err(|_| format!("bad frame field {frame:?}"))?;
    let (camera, outfit) = match cam {
        "A" => (0, 0),
        "B" => (1, 0),
        "C" => (2, 1),
        other => return Err(format!("camera {other:?} not in A/B/C")),
    };
    Ok(Parsed { id, outfit, camera })
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn is_mask_file(p: &Path) -> bool {
    p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(".mask.png"))
}

/// Parses every image under `root` according to `layout`.
pub fn ingest_directory(root: &Path, layout: Layout) -> Result<(Dataset, IngestReport)> {
    if !root.is_dir() {
        return Err(Error::config(format!("{} is not a directory", root.display())));
    }
    let palette = match root.join(PALETTE_FILE) {
        p if p.exists() => Palette::load(&p)?,
        _ => Palette::default(),
    };
    let mut report = IngestReport::default();
    let mut rows: Vec<(Parsed, Split, PathBuf)> = Vec::new();
    for (split, dir) in [(Split::Train, "train"), (Split::Query, "query"), (Split::Gallery, "gallery")] {
        let base = root.join(dir);
        if !base.is_dir() {
            continue;
        }
        let mut files = Vec::new();
        walk(&base, &mut files)?;
        for f in files.into_iter().filter(|f| !is_mask_file(f)) {
            let rel: Vec<String> = f
                .strip_prefix(&base)
                .expect("walked under base")
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect();
            let rel: Vec<&str> = rel.iter().map(String::as_str).collect();
            let parsed = match layout {
                Layout::LtccLike => parse_ltcc(&rel),
                Layout::PrccLike => parse_prcc(&rel),
            };
            match parsed {
                Ok(p) => rows.push((p, split, f)),
                Err(reason) => {
                    log::warn!("skipping {}: {reason}", f.display());
                    report.skipped.push(Skipped {
                        path: f.display().to_string(),
                        reason,
                    });
                }
            }
        }
    }
    for (p, _, _) in &rows {
        report.identity_map.insert(p.id, 0);
    }
    for (i, v) in report.identity_map.values_mut().enumerate() {
        *v = i as u32;
    }
    let mut pairs: Vec<(u32, u32)> = rows.iter().map(|(p, _, _)| (p.id, p.outfit)).collect();
    pairs.sort_unstable();
    pairs.dedup();
    for (i, (id, outfit)) in pairs.iter().enumerate() {
        report.clothing_map.insert(format!("{id}/{outfit}"), i as u32);
    }
    let mut samples = Vec::with_capacity(rows.len());
    for (p, split, path) in rows {
        let image = match load_png_rgb(&path) {
            Ok(img) => img,
            Err(e) => {
                report.skipped.push(Skipped {
                    path: path.display().to_string(),
                    reason: format!("unreadable image: {e}"),
                });
                continue;
            }
        };
        let mask_path = path.with_extension("mask.png");
        let mask = if mask_path.exists() {
            Some(ParsingMask::load_png(&mask_path, &palette)?)
        } else {
            None
        };
        report.with_mask += mask.is_some() as usize;
        samples.push(Sample {
            image,
            identity: report.identity_map[&p.id],
            clothing: report.clothing_map[&format!("{}/{}", p.id, p.outfit)],
            camera: p.camera,
            mask,
            split,
        });
    }
    report.parsed = samples.len();
    let ds = Dataset {
        samples,
        num_identities: report.identity_map.len(),
        num_clothes: report.clothing_map.len(),
    };
    ds.validate()?;
    Ok((ds, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ltcc_grammar() {
        assert_eq!(
            parse_ltcc(&["12_3_c4_0005.png"]),
            Ok(Parsed {
                id: 12,
                outfit: 3,
                camera: 4
            })
        );
        assert!(parse_ltcc(&["12_3_4_0005.png"]).is_err());
        assert!(parse_ltcc(&["12_3_c4.png"]).is_err());
        assert!(parse_ltcc(&["12_3_c4_1.jpg"]).is_err());
    }

    #[test]
    fn prcc_grammar() {
        assert_eq!(
            parse_prcc(&["007", "C_12.png"]),
            Ok(Parsed {
                id: 7,
                outfit: 1,
                camera: 2
            })
        );
        assert_eq!(parse_prcc(&["7", "B_1.png"]).map(|p| p.outfit), Ok(0));
        assert!(parse_prcc(&["7", "D_1.png"]).is_err());
        assert!(parse_prcc(&["x", "A_1.png"]).is_err());
    }

    #[test]
    fn layout_names() {
        assert_eq!("ltcc_like".parse::<Layout>().ok(), Some(Layout::LtccLike));
        assert!("celeb".parse::<Layout>().is_err());
    }
}
