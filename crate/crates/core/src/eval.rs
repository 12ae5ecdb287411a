//! Retrieval metrics: cosine distances, protocol filtering, CMC and mAP,
//! plus similarity-matrix export.

use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::augment::{augment, AugmentConfig};
use crate::data::{Dataset, Split};
use crate::dhp::{shuffle_partition, DhpGroups};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{l2_normalize_strict, to_f64_rows};
use crate::params::Ctx;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    /// Every gallery entry counts.
    Standard,
    /// Gallery entries with the query's identity and clothing are dropped.
    ClothChanging,
    /// Same-identity gallery entries in other clothing are dropped.
    SameClothes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    pub mode: ProtocolMode,
    /// Also drops gallery entries with the query's identity and camera.
    #[serde(default)]
    pub exclude_same_camera: bool,
}

impl Protocol {
    pub const CLOTH_CHANGING: Protocol = Protocol {
        mode: ProtocolMode::ClothChanging,
        exclude_same_camera: false,
    };
    pub const STANDARD: Protocol = Protocol {
        mode: ProtocolMode::Standard,
        exclude_same_camera: false,
    };

    /// Whether gallery entry `g` takes part in ranking for query `q`.
    pub fn keeps(&self, q: (u32, u32, u32), g: (u32, u32, u32)) -> bool {
        let (qi, qc, qcam) = q;
        let (gi, gc, gcam) = g;
        let same_id = qi == gi;
        if self.exclude_same_camera && same_id && qcam == gcam {
            return false;
        }
        match self.mode {
            ProtocolMode::Standard => true,
            ProtocolMode::ClothChanging => !(same_id && qc == gc),
            ProtocolMode::SameClothes => !(same_id && qc != gc),
        }
    }
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol::CLOTH_CHANGING
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            ProtocolMode::Standard => "standard",
            ProtocolMode::ClothChanging => "cloth_changing",
            ProtocolMode::SameClothes => "same_clothes",
        };
        write!(f, "{mode}")?;
        if self.exclude_same_camera {
            write!(f, "+exclude_same_camera")?;
        }
        Ok(())
    }
}

/// Identity, clothing and camera labels of a query or gallery set.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SetLabels {
    pub identity: Vec<u32>,
    pub clothing: Vec<u32>,
    pub camera: Vec<u32>,
}

impl SetLabels {
    pub fn len(&self) -> usize {
        self.identity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identity.is_empty()
    }

    fn get(&self, i: usize) -> (u32, u32, u32) {
        (self.identity[i], self.clothing[i], self.camera[i])
    }

    fn check(&self) -> Result<()> {
        if self.clothing.len() != self.len() || self.camera.len() != self.len() {
            return Err(Error::Shape("label vectors differ in length".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    /// `cmc[k]` is the fraction of valid queries with a match in the top `k+1`.
    pub cmc: Vec<f64>,
    #[serde(rename = "mAP")]
    pub map: f64,
    /// AP per valid query, in query order.
    pub per_query_ap: Vec<f64>,
    pub num_valid_queries: usize,
    pub num_dropped_queries: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }

    pub fn cmc_csv(&self) -> String {
        let mut s = String::from("rank,cmc\n");
        for (k, v) in self.cmc.iter().enumerate() {
            s.push_str(&format!("{},{v}\n", k + 1));
        }
        s
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Contract("cosine of a zero-norm vector".into()));
    }
    Ok(dot / (na * nb))
}

/// Pairwise cosine similarities.
pub fn similarity_matrix(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Array2<f64>> {
    if let Some(d) = a.first().map(Vec::len) {
        if a.iter().chain(b).any(|r| r.len() != d) {
            return Err(Error::Shape("feature rows differ in width".into()));
        }
    }
    let mut out = Array2::zeros((a.len(), b.len()));
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[[i, j]] = cosine(x, y)?;
        }
    }
    Ok(out)
}

/// `1 − cos(q_i, g_j)`.
pub fn distance_matrix(q: &[Vec<f64>], g: &[Vec<f64>]) -> Result<Array2<f64>> {
    Ok(similarity_matrix(q, g)?.mapv(|s| 1.0 - s))
}

/// Ranks the gallery for every query under `protocol`. Equal distances keep
/// gallery order.
pub fn cmc_map(dist: &Array2<f64>, q: &SetLabels, g: &SetLabels, protocol: Protocol, max_rank: usize) -> Result<EvalReport> {
    q.check()?;
    g.check()?;
    if dist.dim() != (q.len(), g.len()) {
        return Err(Error::Shape(format!("distance matrix {:?} for {} x {}", dist.dim(), q.len(), g.len())));
    }
    if max_rank == 0 {
        return Err(Error::config("max_rank must be positive"));
    }
    let mut hits = vec![0usize; max_rank];
    let mut aps = Vec::new();
    let mut dropped = 0;
    for qi in 0..q.len() {
        let ql = q.get(qi);
        let mut order: Vec<usize> = (0..g.len()).filter(|&j| protocol.keeps(ql, g.get(j))).collect();
        order.sort_by(|&a, &b| dist[[qi, a]].total_cmp(&dist[[qi, b]]).then(a.cmp(&b)));
        let relevant: Vec<bool> = order.iter().map(|&j| g.identity[j] == ql.0).collect();
        let Some(first) = relevant.iter().position(|&r| r) else {
            dropped += 1;
            continue;
        };
        for h in hits.iter_mut().skip(first) {
            *h += 1;
        }
        let mut found = 0;
        let mut precision_sum = 0.0;
        for (rank, &r) in relevant.iter().enumerate() {
            if r {
                found += 1;
                precision_sum += found as f64 / (rank + 1) as f64;
            }
        }
        aps.push(precision_sum / found as f64);
    }
    if aps.is_empty() {
        return Err(Error::NoValidQueries(protocol.to_string()));
    }
    let n = aps.len() as f64;
    Ok(EvalReport {
        protocol,
        cmc: hits.iter().map(|&h| h as f64 / n).collect(),
        map: aps.iter().sum::<f64>() / n,
        num_valid_queries: aps.len(),
        per_query_ap: aps,
        num_dropped_queries: dropped,
        seed: None,
    })
}

/// Writes the `n × n` cosine similarity matrix as CSV, and optionally a
/// grayscale heat map (black −1, white +1, `cell` pixels per entry).
pub fn export_similarity_matrix(features: &[Vec<f64>], csv_path: &Path, heatmap: Option<(&Path, u32)>) -> Result<Array2<f64>> {
    let sim = similarity_matrix(features, features)?;
    let mut s = String::new();
    for row in sim.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    fs::write(csv_path, s)?;
    if let Some((png, cell)) = heatmap {
        let n = sim.nrows() as u32;
        let cell = cell.max(1);
        let img = image::GrayImage::from_fn(n * cell, n * cell, |x, y| {
            let v = sim[[(y / cell) as usize, (x / cell) as usize]];
            image::Luma([(((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8])
        });
        img.save(png)?;
    }
    Ok(sim)
}

pub fn load_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path)?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|c| c.trim().parse::<f64>().map_err(|e| Error::config(format!("bad CSV cell {c:?}: {e}"))))
                .collect()
        })
        .collect::<Result<_>>()?;
    let cols = rows.first().map(Vec::len).unwrap_or(0);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::config("ragged CSV matrix"));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((flat.len() / cols.max(1), cols), flat).map_err(|e| Error::Shape(e.to_string()))
}

/// ℓ2-normalized retrieval features of `indices`, resized on the eval path.
/// DHP groupings are drawn per image, in order, from a generator seeded by
/// `seed`.
pub fn extract_features(model: &Model, data: &Dataset, indices: &[usize], aug: &AugmentConfig, seed: u64, batch: usize) -> Result<Vec<Vec<f64>>> {
    let ctx = Ctx::inference();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.num_patches();
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch.max(1)) {
        let samples: Vec<_> = chunk.iter().map(|&i| augment(&data.samples[i], false, aug, &mut rng).0).collect();
        let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
        let groups: Option<Vec<DhpGroups>> = if model.cfg.modules.dhp {
            Some(chunk.iter().map(|_| shuffle_partition(n, &mut rng)).collect::<Result<_>>()?)
        } else {
            None
        };
        let f = model.final_feature(&ctx, &images, groups.as_deref())?;
        out.extend(to_f64_rows(&l2_normalize_strict(&f)?)?);
    }
    Ok(out)
}

pub fn labels_of(data: &Dataset, indices: &[usize]) -> SetLabels {
    let pick = |f: fn(&crate::data::Sample) -> u32| indices.iter().map(|&i| f(&data.samples[i])).collect();
    SetLabels {
        identity: pick(|s| s.identity),
        clothing: pick(|s| s.clothing),
        camera: pick(|s| s.camera),
    }
}

/// Query-vs-gallery evaluation of `model` on `data`.
pub fn evaluate(model: &Model, data: &Dataset, protocol: Protocol, aug: &AugmentConfig, seed: u64, max_rank: usize) -> Result<EvalReport> {
    let qi = data.split(Split::Query);
    let gi = data.split(Split::Gallery);
    if qi.is_empty() || gi.is_empty() {
        return Err(Error::NoValidQueries(format!("{protocol}: empty query or gallery split")));
    }
    let qf = extract_features(model, data, &qi, aug, seed, 32)?;
    let gf = extract_features(model, data, &gi, aug, seed.wrapping_add(1), 32)?;
    let dist = distance_matrix(&qf, &gf)?;
    let mut report = cmc_map(&dist, &labels_of(data, &qi), &labels_of(data, &gi), protocol, max_rank)?;
    report.seed = Some(seed);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(ids: &[u32]) -> SetLabels {
        SetLabels {
            identity: ids.to_vec(),
            clothing: vec![0; ids.len()],
            camera: vec![0; ids.len()],
        }
    }

    #[test]
    fn distance_basics() -> Result<()> {
        let d = distance_matrix(&[vec![1.0, 0.0]], &[vec![2.0, 0.0], vec![0.0, 3.0]])?;
        assert!(d[[0, 0]].abs() < 1e-12);
        assert!((d[[0, 1]] - 1.0).abs() < 1e-12);
        assert!(matches!(distance_matrix(&[vec![0.0, 0.0]], &[vec![1.0, 0.0]]), Err(Error::Contract(_))));
        Ok(())
    }

    #[test]
    fn ap_of_ranks_one_and_three() -> Result<()> {
        let dist = Array2::from_shape_vec((1, 5), vec![0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        let r = cmc_map(&dist, &labels(&[7]), &labels(&[7, 1, 7, 2, 3]), Protocol::STANDARD, 5)?;
        assert!((r.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(r.cmc, vec![1.0; 5]);
        Ok(())
    }

    #[test]
    fn ties_follow_gallery_order() -> Result<()> {
        let dist = Array2::from_shape_vec((1, 3), vec![0.5, 0.5, 0.5]).unwrap();
        let r = cmc_map(&dist, &labels(&[1]), &labels(&[0, 1, 0]), Protocol::STANDARD, 3)?;
        assert_eq!(r.cmc, vec![0.0, 1.0, 1.0]);
        assert!((r.map - 0.5).abs() < 1e-12);
        Ok(())
    }

    #[test]
    fn no_valid_query_names_protocol() {
        let dist = Array2::zeros((1, 1));
        let q = labels(&[1]);
        let err = cmc_map(&dist, &q, &q, Protocol::CLOTH_CHANGING, 1).unwrap_err();
        assert!(err.to_string().contains("cloth_changing"), "{err}");
    }

    #[test]
    fn same_camera_exclusion() {
        let p = Protocol {
            mode: ProtocolMode::Standard,
            exclude_same_camera: true,
        };
        assert!(!p.keeps((1, 0, 2), (1, 5, 2)));
        assert!(p.keeps((1, 0, 2), (3, 5, 2)));
        let s = Protocol {
            mode: ProtocolMode::SameClothes,
            exclude_same_camera: false,
        };
        assert!(!s.keeps((1, 0, 0), (1, 1, 0)));
        assert!(s.keeps((1, 0, 0), (1, 0, 1)));
    }
}
