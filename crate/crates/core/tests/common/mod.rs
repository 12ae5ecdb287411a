//! Scalar reference implementations used by the integration tests. Every
//! function here is written with plain loops over `f64` and shares no code
//! with the library.

#![allow(dead_code)]

pub mod suites;

use candle_core::{Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn tensor(m: &Mat) -> Tensor {
    let r = m.len();
    let c = m[0].len();
    let flat: Vec<f64> = m.iter().flatten().copied().collect();
    Tensor::from_vec(flat, (r, c), &Device::Cpu).unwrap()
}

pub fn value(t: &Tensor) -> f64 {
    t.to_dtype(candle_core::DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn rows(t: &Tensor) -> Mat {
    t.to_dtype(candle_core::DType::F64).unwrap().to_vec2::<f64>().unwrap()
}

pub fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    (0..r).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

pub fn random_labels(rng: &mut ChaCha8Rng, b: usize, classes: u32) -> Vec<u32> {
    (0..b).map(|_| rng.random_range(0..classes)).collect()
}

pub fn random_distribution(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    (0..r)
        .map(|_| {
            let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|x| x / s).collect()
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

fn neg_log_softmax_at(logits: &[f64], at: usize) -> f64 {
    let mut denom = 0.0;
    for &l in logits {
        denom += l.exp();
    }
    -(logits[at].exp() / denom).ln()
}

/// Candidates are the distinct batch labels in order of first appearance.
pub fn i2t(v: &Mat, t_class: &Mat, labels: &[u32], tau: f64) -> f64 {
    let mut distinct: Vec<u32> = Vec::new();
    for &l in labels {
        if !distinct.contains(&l) {
            distinct.push(l);
        }
    }
    let mut total = 0.0;
    for i in 0..v.len() {
        let logits: Vec<f64> = distinct.iter().map(|&d| cosine(&v[i], &t_class[d as usize]) / tau).collect();
        let at = distinct.iter().position(|&d| d == labels[i]).unwrap();
        total += neg_log_softmax_at(&logits, at);
    }
    total / v.len() as f64
}

pub fn t2i(v: &Mat, t: &Mat, labels: &[u32], tau: f64) -> f64 {
    let b = v.len();
    let mut total = 0.0;
    for i in 0..b {
        let logits: Vec<f64> = (0..b).map(|j| cosine(&t[i], &v[j]) / tau).collect();
        let positives: Vec<usize> = (0..b).filter(|&p| labels[p] == labels[i]).collect();
        let mut s = 0.0;
        for &p in &positives {
            s += neg_log_softmax_at(&logits, p);
        }
        total += s / positives.len() as f64;
    }
    total / b as f64
}

fn prompt_ce(v: &Mat, t: &Mat, labels: &[u32]) -> f64 {
    let mut total = 0.0;
    for i in 0..v.len() {
        let logits: Vec<f64> = t.iter().map(|row| cosine(&v[i], row)).collect();
        total += neg_log_softmax_at(&logits, labels[i] as usize);
    }
    total / v.len() as f64
}

pub fn guide(v_i: &Mat, v_c: &Mat, t_id: &Mat, t_clo: &Mat, y_i: &[u32], y_c: &[u32]) -> f64 {
    prompt_ce(v_i, t_id, y_i) + prompt_ce(v_c, t_clo, y_c)
}

pub fn spatial_consistency(a: &Mat, b: &Mat) -> f64 {
    let mut total = 0.0;
    for i in 0..a.len() {
        for k in 0..a[i].len() {
            total += (a[i][k] - b[i][k]).powi(2);
        }
    }
    total / a.len() as f64
}

pub fn decoupling(a: &Mat, b: &Mat) -> f64 {
    let mut total = 0.0;
    for i in 0..a.len() {
        total += cosine(&a[i], &b[i]).max(0.0);
    }
    total / a.len() as f64
}

pub fn symmetric_kl(p: &Mat, q: &Mat) -> f64 {
    let mut total = 0.0;
    for i in 0..p.len() {
        for k in 0..p[i].len() {
            total += p[i][k] * (p[i][k] / q[i][k]).ln() + q[i][k] * (q[i][k] / p[i][k]).ln();
        }
    }
    total / p.len() as f64
}

pub fn cross_entropy_probs(p: &Mat, labels: &[u32]) -> f64 {
    let mut total = 0.0;
    for i in 0..p.len() {
        total -= p[i][labels[i] as usize].ln();
    }
    total / p.len() as f64
}

pub fn cross_entropy_logits(z: &Mat, labels: &[u32]) -> f64 {
    let mut total = 0.0;
    for i in 0..z.len() {
        total += neg_log_softmax_at(&z[i], labels[i] as usize);
    }
    total / z.len() as f64
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += (a[k] - b[k]).powi(2);
    }
    s.sqrt()
}

/// Batch-hard triplet loss; anchors without a positive or a negative are
/// skipped and an empty set of anchors gives 0.
pub fn triplet(f: &Mat, labels: &[u32], margin: f64) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for a in 0..f.len() {
        let mut hardest_pos: Option<f64> = None;
        let mut hardest_neg: Option<f64> = None;
        for j in 0..f.len() {
            if j == a {
                continue;
            }
            let d = euclid(&f[a], &f[j]);
            if labels[j] == labels[a] {
                hardest_pos = Some(hardest_pos.map_or(d, |h| h.max(d)));
            } else {
                hardest_neg = Some(hardest_neg.map_or(d, |h| h.min(d)));
            }
        }
        if let (Some(p), Some(n)) = (hardest_pos, hardest_neg) {
            total += (p - n + margin).max(0.0);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Sum of the four prompt-learning terms. `t_id` and `t_clo` are indexed by
/// label; the per-sample text rows are looked up from them.
pub fn stage1(v_ori: &Mat, v_clo: &Mat, t_id: &Mat, t_clo: &Mat, y_i: &[u32], y_c: &[u32], tau: f64) -> f64 {
    let rows_of = |t: &Mat, y: &[u32]| -> Mat { y.iter().map(|&l| t[l as usize].clone()).collect() };
    i2t(v_ori, t_id, y_i, tau)
        + i2t(v_clo, t_clo, y_c, tau)
        + t2i(v_ori, &rows_of(t_id, y_i), y_i, tau)
        + t2i(v_clo, &rows_of(t_clo, y_c), y_c, tau)
}

/// Average precision of one ranked list given the 1-based ranks of its
/// relevant items.
pub fn average_precision(relevant_ranks: &[usize]) -> f64 {
    let mut ranks = relevant_ranks.to_vec();
    ranks.sort();
    let mut s = 0.0;
    for (k, &r) in ranks.iter().enumerate() {
        s += (k + 1) as f64 / r as f64;
    }
    s / ranks.len() as f64
}

/// Gallery item labels as (identity, clothing, camera).
pub type Item = (u32, u32, u32);

pub enum Mode {
    Standard,
    ClothChanging,
    SameClothes,
}

fn kept(mode: &Mode, exclude_same_camera: bool, q: Item, g: Item) -> bool {
    if exclude_same_camera && q.0 == g.0 && q.2 == g.2 {
        return false;
    }
    match mode {
        Mode::Standard => true,
        Mode::ClothChanging => !(q.0 == g.0 && q.1 == g.1),
        Mode::SameClothes => !(q.0 == g.0 && q.1 != g.1),
    }
}

/// Reference CMC curve and mAP. The rank of each gallery item is found by
/// counting the kept items that precede it (smaller distance, or equal
/// distance and lower index) instead of sorting. Returns `None` when no
/// query has a match.
pub fn cmc_map_reference(
    dist: &Mat,
    queries: &[Item],
    gallery: &[Item],
    mode: &Mode,
    exclude_same_camera: bool,
    max_rank: usize,
) -> Option<(Vec<f64>, f64, usize)> {
    let mut hits = vec![0usize; max_rank];
    let mut aps = Vec::new();
    let mut dropped = 0;
    for (qi, &q) in queries.iter().enumerate() {
        let candidates: Vec<usize> = (0..gallery.len()).filter(|&j| kept(mode, exclude_same_camera, q, gallery[j])).collect();
        let mut ranks = Vec::new();
        for &j in &candidates {
            if gallery[j].0 != q.0 {
                continue;
            }
            let ahead = candidates
                .iter()
                .filter(|&&k| dist[qi][k] < dist[qi][j] || (dist[qi][k] == dist[qi][j] && k < j))
                .count();
            ranks.push(ahead + 1);
        }
        if ranks.is_empty() {
            dropped += 1;
            continue;
        }
        ranks.sort();
        for (k, h) in hits.iter_mut().enumerate() {
            if ranks[0] <= k + 1 {
                *h += 1;
            }
        }
        let mut s = 0.0;
        for (found, &r) in ranks.iter().enumerate() {
            s += (found + 1) as f64 / r as f64;
        }
        aps.push(s / ranks.len() as f64);
    }
    if aps.is_empty() {
        return None;
    }
    let n = aps.len() as f64;
    Some((hits.iter().map(|&h| h as f64 / n).collect(), aps.iter().sum::<f64>() / n, dropped))
}
