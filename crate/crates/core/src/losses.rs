//! Training objectives: image/text contrastive terms, prompt guidance,
//! clothing stripping, bio-guided distillation, identity cross-entropy and
//! batch-hard triplet.
//!
//! Every function takes embeddings of any float dtype and returns a scalar
//! tensor that participates in autograd.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::encoders::ClassProbs;
use crate::error::{Error, Result};
use crate::nn::{self, l2_normalize_strict, log_softmax_last};

/// Default triplet margin.
pub const TRIPLET_MARGIN: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityContext {
    pub tau: f64,
}

impl SimilarityContext {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::config(format!("temperature must be positive, got {tau}")));
        }
        Ok(SimilarityContext { tau })
    }
}

impl Default for SimilarityContext {
    fn default() -> Self {
        SimilarityContext { tau: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub name: String,
    pub value: f64,
    pub terms: BTreeMap<String, f64>,
}

/// A differentiable total together with its named parts.
#[derive(Debug, Clone)]
pub struct Composite {
    pub name: &'static str,
    pub total: Tensor,
    pub terms: Vec<(&'static str, Tensor)>,
}

impl Composite {
    pub fn sum(name: &'static str, terms: Vec<(&'static str, Tensor)>) -> Result<Self> {
        let mut it = terms.iter();
        let first = it
            .next()
            .ok_or_else(|| Error::Shape("empty loss composition".into()))?
            .1
            .clone();
        let total = it.try_fold(first, |acc, (_, t)| acc.add(t))?;
        Ok(Composite { name, total, terms })
    }

    pub fn report(&self) -> Result<LossReport> {
        let mut terms = BTreeMap::new();
        for (k, t) in &self.terms {
            terms.insert(k.to_string(), scalar(t)?);
        }
        Ok(LossReport {
            name: self.name.to_string(),
            value: scalar(&self.total)?,
            terms,
        })
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn check_rows(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn check_labels(labels: &[u32], rows: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!("{} labels for {rows} rows", labels.len())));
    }
    Ok(())
}

/// Pairwise inner products of ℓ2-normalized rows, `[A, C]`.
pub fn cosine_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let a = l2_normalize_strict(a)?;
    let b = l2_normalize_strict(b)?;
    Ok(a.matmul(&b.t()?)?)
}

fn zero_like(t: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros((), t.dtype(), t.device())?)
}

/// Picks `x[i, cols[i]]` for every row, returning `[B]`.
fn pick(x: &Tensor, cols: &[u32]) -> Result<Tensor> {
    let idx = Tensor::new(cols, x.device())?.unsqueeze(1)?;
    Ok(x.gather(&idx, 1)?.squeeze(1)?)
}

/// Distinct labels in first-occurrence order and each sample's position among them.
pub fn distinct_labels(labels: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut distinct: Vec<u32> = Vec::new();
    let pos = labels
        .iter()
        .map(|l| match distinct.iter().position(|d| d == l) {
            Some(p) => p as u32,
            None => {
                distinct.push(*l);
                (distinct.len() - 1) as u32
            }
        })
        .collect();
    (distinct, pos)
}

/// Image-to-text contrastive loss against class-indexed text embeddings.
///
/// The candidate set is the distinct labels present in the batch, so repeated
/// identities never place a positive in their own denominator.
pub fn i2t_contrastive(v: &Tensor, t_class: &Tensor, labels: &[u32], sim: SimilarityContext) -> Result<Tensor> {
    let (b, _) = v.dims2()?;
    check_labels(labels, b)?;
    let classes = t_class.dim(0)?;
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Lookup {
            what: "i2t class",
            label: bad as usize,
            size: classes,
        });
    }
    let (distinct, pos) = distinct_labels(labels);
    let idx = Tensor::new(distinct.as_slice(), v.device())?;
    let candidates = t_class.index_select(&idx, 0)?;
    i2t_over_candidates(v, &candidates, &pos, sim)
}

/// Same as [`i2t_contrastive`] with the candidates already selected;
/// `targets[i]` is the row of `candidates` matching sample `i`.
pub fn i2t_over_candidates(v: &Tensor, candidates: &Tensor, targets: &[u32], sim: SimilarityContext) -> Result<Tensor> {
    SimilarityContext::new(sim.tau)?;
    let logits = (cosine_matrix(v, candidates)? / sim.tau)?;
    let logp = log_softmax_last(&logits)?;
    Ok(pick(&logp, targets)?.mean_all()?.neg()?)
}

/// Text-to-image supervised contrastive loss. `t` holds one text embedding
/// per sample (the embedding of that sample's label); every sample sharing the
/// anchor's label is a positive.
pub fn t2i_supervised_contrastive(v: &Tensor, t: &Tensor, labels: &[u32], sim: SimilarityContext) -> Result<Tensor> {
    SimilarityContext::new(sim.tau)?;
    check_rows(v, t, "t2i")?;
    let b = v.dim(0)?;
    check_labels(labels, b)?;
    // rows: anchor texts, cols: images
    let logits = (cosine_matrix(t, v)? / sim.tau)?;
    let logp = log_softmax_last(&logits)?;
    let mut weights = vec![0f64; b * b];
    for i in 0..b {
        let positives: Vec<usize> = (0..b).filter(|&p| labels[p] == labels[i]).collect();
        let w = 1.0 / positives.len() as f64;
        for p in positives {
            weights[i * b + p] = w;
        }
    }
    let w = Tensor::from_vec(weights, (b, b), v.device())?.to_dtype(v.dtype())?;
    Ok((logp * w)?.sum_all()?.neg()?.affine(1.0 / b as f64, 0.0)?)
}

/// Untempered image-to-text cross-entropy of original features against all
/// identity prompts plus clothing features against all clothing prompts.
pub fn guide_loss(v_i: &Tensor, v_c: &Tensor, t_id: &Tensor, t_clo: &Tensor, y_i: &[u32], y_c: &[u32]) -> Result<Tensor> {
    let id_term = prompt_cross_entropy(v_i, t_id, y_i, "identity")?;
    let clo_term = prompt_cross_entropy(v_c, t_clo, y_c, "clothing")?;
    Ok((id_term + clo_term)?)
}

fn prompt_cross_entropy(v: &Tensor, t: &Tensor, labels: &[u32], what: &'static str) -> Result<Tensor> {
    let b = v.dim(0)?;
    check_labels(labels, b)?;
    let classes = t.dim(0)?;
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Lookup {
            what,
            label: bad as usize,
            size: classes,
        });
    }
    let logp = log_softmax_last(&cosine_matrix(v, t)?)?;
    Ok(pick(&logp, labels)?.mean_all()?.neg()?)
}

/// Mean squared ℓ2 distance between mapped features and clothing features.
/// The clothing side is a detached target.
pub fn spatial_consistency(f_img2clo: &Tensor, f_clo: &Tensor) -> Result<Tensor> {
    check_rows(f_img2clo, f_clo, "spatial consistency")?;
    let diff = f_img2clo.sub(&f_clo.detach())?;
    Ok(diff.sqr()?.sum(D::Minus1)?.mean_all()?)
}

/// Mean hinge on the cosine between original and clothing-mapped features.
pub fn decoupling_loss(f_ori: &Tensor, f_img2clo: &Tensor) -> Result<Tensor> {
    check_rows(f_ori, f_img2clo, "decoupling")?;
    let a = l2_normalize_strict(f_ori)?;
    let b = l2_normalize_strict(f_img2clo)?;
    let cos = (a * b)?.sum(D::Minus1)?;
    Ok(cos.relu()?.mean_all()?)
}

pub fn clothing_stripping_loss(guide: Tensor, sc: Tensor, de: Tensor) -> Result<Composite> {
    Composite::sum("cs", vec![("guide", guide), ("sc", sc), ("de", de)])
}

fn check_distribution(p: &Tensor) -> Result<()> {
    let rows = p.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    for (i, r) in rows.iter().enumerate() {
        let s: f64 = r.iter().sum();
        if (s - 1.0).abs() > 1e-4 || r.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::Contract(format!("row {i} is not a strictly positive distribution (sum {s})")));
        }
    }
    Ok(())
}

/// Symmetric KL divergence, summed over classes and averaged over the batch.
pub fn bio_guided_loss(p_img: &ClassProbs, p_bio: &ClassProbs) -> Result<Tensor> {
    check_rows(&p_img.0, &p_bio.0, "bio guided")?;
    check_distribution(&p_img.0)?;
    check_distribution(&p_bio.0)?;
    let (p, q) = (&p_img.0, &p_bio.0);
    let log_ratio = p.log()?.sub(&q.log()?)?;
    let sym = p.sub(q)?.mul(&log_ratio)?;
    Ok(sym.sum(D::Minus1)?.mean_all()?)
}

/// Mean negative log ground-truth probability, with optional label smoothing.
pub fn cross_entropy(probs: &ClassProbs, labels: &[u32], smoothing: f64) -> Result<Tensor> {
    let (b, c) = probs.0.dims2()?;
    check_labels(labels, b)?;
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::Lookup {
            what: "cross-entropy class",
            label: bad as usize,
            size: c,
        });
    }
    let logp = probs.0.log()?;
    smoothed_nll(&logp, labels, smoothing)
}

/// Cross-entropy from raw logits.
pub fn cross_entropy_logits(logits: &Tensor, labels: &[u32], smoothing: f64) -> Result<Tensor> {
    let (b, _) = logits.dims2()?;
    check_labels(labels, b)?;
    smoothed_nll(&log_softmax_last(logits)?, labels, smoothing)
}

fn smoothed_nll(logp: &Tensor, labels: &[u32], smoothing: f64) -> Result<Tensor> {
    let nll = pick(logp, labels)?.mean_all()?.neg()?;
    if smoothing == 0.0 {
        return Ok(nll);
    }
    let uniform = logp.mean(D::Minus1)?.mean_all()?.neg()?;
    Ok(((nll * (1.0 - smoothing))? + (uniform * smoothing)?)?)
}

/// Hardest positive and hardest negative per anchor by Euclidean distance.
/// Anchors lacking either are omitted.
pub fn mine_batch_hard(features: &[Vec<f64>], labels: &[u32]) -> Vec<(usize, usize, usize)> {
    let b = features.len();
    let dist = |i: usize, j: usize| -> f64 {
        features[i]
            .iter()
            .zip(&features[j])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    };
    let mut out = Vec::new();
    for a in 0..b {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            let d = dist(a, j);
            if labels[j] == labels[a] {
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        if let (Some((p, _)), Some((n, _))) = (pos, neg) {
            out.push((a, p, n));
        }
    }
    out
}

fn euclidean_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(a.sub(b)?.sqr()?.sum(D::Minus1)?.maximum(1e-12)?.sqrt()?)
}

/// Batch-hard triplet loss on un-normalized features.
pub fn triplet_loss(features: &Tensor, labels: &[u32], margin: f64) -> Result<Tensor> {
    let (b, _) = features.dims2()?;
    check_labels(labels, b)?;
    let host = nn::to_f64_rows(features)?;
    let triples = mine_batch_hard(&host, labels);
    if triples.is_empty() {
        log::warn!("triplet loss: no anchor has both a positive and a negative; returning 0");
        return zero_like(features);
    }
    let dev = features.device();
    let col = |k: usize| -> Result<Tensor> {
        let idx: Vec<u32> = triples
            .iter()
            .map(|t| [t.0, t.1, t.2][k] as u32)
            .collect();
        Ok(features.index_select(&Tensor::new(idx.as_slice(), dev)?, 0)?)
    };
    let (anchor, pos, neg) = (col(0)?, col(1)?, col(2)?);
    let d_p = euclidean_rows(&anchor, &pos)?;
    let d_n = euclidean_rows(&anchor, &neg)?;
    Ok((d_p - d_n)?.affine(1.0, margin)?.relu()?.mean_all()?)
}

/// Inputs of the prompt-learning objective. Text rows are per sample.
pub struct Stage1Inputs<'a> {
    pub v_ori: &'a Tensor,
    pub v_clo: &'a Tensor,
    pub t_id_rows: &'a Tensor,
    pub t_clo_rows: &'a Tensor,
    pub y_i: &'a [u32],
    pub y_c: &'a [u32],
}

/// Selects the first text row of each distinct label as i2t candidates.
fn candidates_from_rows(rows: &Tensor, labels: &[u32]) -> Result<(Tensor, Vec<u32>)> {
    let (distinct, pos) = distinct_labels(labels);
    let first: Vec<u32> = distinct
        .iter()
        .map(|d| labels.iter().position(|l| l == d).unwrap() as u32)
        .collect();
    let cand = rows.index_select(&Tensor::new(first.as_slice(), rows.device())?, 0)?;
    Ok((cand, pos))
}

pub fn stage1_loss(inp: &Stage1Inputs, sim: SimilarityContext) -> Result<Composite> {
    let (cand_id, pos_id) = candidates_from_rows(inp.t_id_rows, inp.y_i)?;
    let (cand_clo, pos_clo) = candidates_from_rows(inp.t_clo_rows, inp.y_c)?;
    Composite::sum(
        "stage1",
        vec![
            ("i2t_id", i2t_over_candidates(inp.v_ori, &cand_id, &pos_id, sim)?),
            ("i2t_clo", i2t_over_candidates(inp.v_clo, &cand_clo, &pos_clo, sim)?),
            ("t2i_id", t2i_supervised_contrastive(inp.v_ori, inp.t_id_rows, inp.y_i, sim)?),
            ("t2i_clo", t2i_supervised_contrastive(inp.v_clo, inp.t_clo_rows, inp.y_c, sim)?),
        ],
    )
}

/// Unweighted sum of identity cross-entropy, triplet, clothing stripping and
/// bio-guided terms.
pub fn stage2_loss(ce: Tensor, tri: Tensor, cs: Tensor, bg: Tensor) -> Result<Composite> {
    Composite::sum("stage2", vec![("ce", ce), ("tri", tri), ("cs", cs), ("bg", bg)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(rows: &[&[f64]]) -> Tensor {
        let r = rows.len();
        let c = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|x| x.iter().copied()).collect();
        Tensor::from_vec(flat, (r, c), &Device::Cpu).unwrap()
    }

    fn s(x: Result<Tensor>) -> f64 {
        scalar(&x.unwrap()).unwrap()
    }

    #[test]
    fn i2t_anchors() {
        let sim = SimilarityContext::default();
        let v = t(&[&[1.0, 0.0]]);
        assert!(s(i2t_contrastive(&v, &t(&[&[0.3, 0.7]]), &[0], sim)).abs() < 1e-12);
        let v = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let text = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let got = s(i2t_contrastive(&v, &text, &[0, 1], sim));
        let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.3133).abs() < 1e-4);
        assert!(i2t_contrastive(&v, &text, &[0, 1], SimilarityContext { tau: 0.0 }).is_err());
    }

    #[test]
    fn t2i_anchors() {
        let sim = SimilarityContext::default();
        let v = t(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let text = t(&[&[0.6, 0.8], &[0.6, 0.8]]);
        let got = s(t2i_supervised_contrastive(&v, &text, &[3, 3], sim));
        assert!((got - 2f64.ln()).abs() < 1e-12);
        let got = s(t2i_supervised_contrastive(&t(&[&[1.0, 2.0]]), &t(&[&[2.0, 1.0]]), &[0], sim));
        assert!(got.abs() < 1e-12);
    }

    #[test]
    fn guide_anchor() {
        let l2 = 2f64.ln();
        let v = t(&[&[1.0, 0.0]]);
        let tid = t(&[&[l2, (1.0 - l2 * l2).sqrt()], &[0.0, 1.0]]);
        let tclo = t(&[&[1.0, 0.0]]);
        let got = s(guide_loss(&v, &v, &tid, &tclo, &[0], &[0]));
        assert!((got - (-(2f64 / 3.0).ln())).abs() < 1e-12);
        assert!(s(guide_loss(&v, &v, &tclo, &tclo, &[0], &[0])).abs() < 1e-12);
        assert!(guide_loss(&v, &v, &tid, &tclo, &[2], &[0]).is_err());
    }

    #[test]
    fn sc_and_de_anchors() {
        assert_eq!(s(spatial_consistency(&t(&[&[3.0, 4.0]]), &t(&[&[0.0, 0.0]]))), 25.0);
        let a = t(&[&[1.0, 0.0]]);
        assert_eq!(s(spatial_consistency(&a, &a)), 0.0);
        assert!(s(decoupling_loss(&a, &t(&[&[0.0, 2.0]]))).abs() < 1e-15);
        assert!((s(decoupling_loss(&a, &a)) - 1.0).abs() < 1e-12);
        assert_eq!(s(decoupling_loss(&a, &t(&[&[-1.0, 0.0]]))), 0.0);
        assert!(matches!(decoupling_loss(&a, &t(&[&[0.0, 0.0]])), Err(Error::Contract(_))));
        let cs = clothing_stripping_loss(
            Tensor::new(0.4055f64, &Device::Cpu).unwrap(),
            Tensor::new(25f64, &Device::Cpu).unwrap(),
            Tensor::new(1f64, &Device::Cpu).unwrap(),
        )
        .unwrap()
        .report()
        .unwrap();
        assert!((cs.value - 26.4055).abs() < 1e-12);
        assert!((cs.terms.values().sum::<f64>() - cs.value).abs() < 1e-9);
    }

    #[test]
    fn kl_anchor_and_contract() {
        let p = ClassProbs(t(&[&[0.8, 0.2]]));
        let q = ClassProbs(t(&[&[0.6, 0.4]]));
        let got = s(bio_guided_loss(&p, &q));
        assert!((got - 0.19617).abs() < 1e-4);
        assert!((got - s(bio_guided_loss(&q, &p))).abs() < 1e-15);
        assert_eq!(s(bio_guided_loss(&p, &p)), 0.0);
        let bad = ClassProbs(t(&[&[0.8, 0.8]]));
        assert!(matches!(bio_guided_loss(&bad, &q), Err(Error::Contract(_))));
    }

    #[test]
    fn ce_anchor() {
        let u = ClassProbs(t(&[&[0.25; 4]]));
        assert!((s(cross_entropy(&u, &[2], 0.0)) - 4f64.ln()).abs() < 1e-12);
        let sure = ClassProbs::from_logits(&t(&[&[100.0, -100.0]])).unwrap();
        assert!(s(cross_entropy(&sure, &[0], 0.0)) < 1e-7);
        let l = t(&[&[0.0; 4]]);
        assert!((s(cross_entropy_logits(&l, &[1], 0.1)) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn triplet_anchors() {
        // anchor 0 at origin; positive at 0.2, negative at 0.6
        let f = t(&[&[0.0], &[0.2], &[0.6]]);
        let got = s(triplet_loss(&f.narrow(0, 0, 3).unwrap(), &[0, 0, 1], 0.3));
        // anchor 0: max(0, 0.3 + 0.2 - 0.6) = 0; anchor 1: d_p .2 d_n .4 -> 0.1; anchor 2 skipped
        assert!((got - 0.05).abs() < 1e-6);
        let f = t(&[&[0.0], &[0.5], &[-0.4]]);
        let triples = mine_batch_hard(&[vec![0.0], vec![0.5], vec![-0.4]], &[0, 0, 1]);
        assert_eq!(triples[0], (0, 1, 2));
        let only_anchor0 = {
            let a = f.narrow(0, 0, 1).unwrap();
            let d_p = euclidean_rows(&a, &f.narrow(0, 1, 1).unwrap()).unwrap();
            let d_n = euclidean_rows(&a, &f.narrow(0, 2, 1).unwrap()).unwrap();
            s(Ok((d_p - d_n).unwrap().affine(1.0, 0.3).unwrap().relu().unwrap().mean_all().unwrap()))
        };
        assert!((only_anchor0 - 0.4).abs() < 1e-6);
        let same = t(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        assert!((s(triplet_loss(&same, &[0, 0, 1, 1], 0.3)) - 0.3).abs() < 1e-9);
        let lonely = t(&[&[1.0], &[2.0]]);
        assert_eq!(s(triplet_loss(&lonely, &[0, 1], 0.3)), 0.0);
    }

    #[test]
    fn stage_compositions() {
        let z = || Tensor::new(0f64, &Device::Cpu).unwrap();
        let r = stage2_loss(z(), z(), z(), z()).unwrap().report().unwrap();
        assert_eq!(r.value, 0.0);
        let keys: Vec<&str> = r.terms.keys().map(|k| k.as_str()).collect();
        assert_eq!(keys, vec!["bg", "ce", "cs", "tri"]);

        let v = t(&[&[1.0, 0.2]]);
        let inp = Stage1Inputs {
            v_ori: &v,
            v_clo: &v,
            t_id_rows: &v,
            t_clo_rows: &v,
            y_i: &[0],
            y_c: &[0],
        };
        let r = stage1_loss(&inp, SimilarityContext::default()).unwrap().report().unwrap();
        assert!(r.value.abs() < 1e-12);
    }
}
