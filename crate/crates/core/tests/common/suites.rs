//! Randomized comparisons shared by the loss tests and the acceptance runner.

use candle_core::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ccreid::encoders::ClassProbs;
use ccreid::losses::{self, SimilarityContext, Stage1Inputs};

use super::*;

/// Largest absolute deviation from the scalar reference, per loss.
pub fn loss_oracle_errors(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: Vec<(&'static str, f64)> = [
        "i2t", "t2i", "guide", "sc", "de", "cs", "bio_kl", "ce", "triplet", "stage1", "stage2",
    ]
    .iter()
    .map(|n| (*n, 0.0))
    .collect();
    let mut note = |name: &str, got: f64, want: f64| {
        let e = (got - want).abs();
        let slot = worst.iter_mut().find(|(n, _)| *n == name).unwrap();
        slot.1 = if e.is_nan() { f64::INFINITY } else { slot.1.max(e) };
    };
    for _ in 0..instances {
        let b = rng.random_range(1..=8);
        let d = rng.random_range(2..=16);
        let ni = rng.random_range(1..=6u32);
        let nc = rng.random_range(1..=6u32);
        let tau = rng.random_range(0.3..2.0);
        let sim = SimilarityContext::new(tau).unwrap();
        let v = random_mat(&mut rng, b, d);
        let v2 = random_mat(&mut rng, b, d);
        let t_id = random_mat(&mut rng, ni as usize, d);
        let t_clo = random_mat(&mut rng, nc as usize, d);
        let y_i = random_labels(&mut rng, b, ni);
        let y_c = random_labels(&mut rng, b, nc);
        let rows_of = |t: &Mat, y: &[u32]| -> Mat { y.iter().map(|&l| t[l as usize].clone()).collect() };

        let i2t = losses::i2t_contrastive(&tensor(&v), &tensor(&t_id), &y_i, sim).unwrap();
        note("i2t", value(&i2t), super::i2t(&v, &t_id, &y_i, tau));

        let t_rows = rows_of(&t_id, &y_i);
        let t2i = losses::t2i_supervised_contrastive(&tensor(&v), &tensor(&t_rows), &y_i, sim).unwrap();
        note("t2i", value(&t2i), super::t2i(&v, &t_rows, &y_i, tau));

        let g = losses::guide_loss(&tensor(&v), &tensor(&v2), &tensor(&t_id), &tensor(&t_clo), &y_i, &y_c).unwrap();
        let g_ref = super::guide(&v, &v2, &t_id, &t_clo, &y_i, &y_c);
        note("guide", value(&g), g_ref);

        let sc = losses::spatial_consistency(&tensor(&v), &tensor(&v2)).unwrap();
        let sc_ref = spatial_consistency(&v, &v2);
        note("sc", value(&sc), sc_ref);

        let de = losses::decoupling_loss(&tensor(&v), &tensor(&v2)).unwrap();
        let de_ref = decoupling(&v, &v2);
        note("de", value(&de), de_ref);

        let cs = losses::clothing_stripping_loss(g, sc, de).unwrap();
        let cs_ref = g_ref + sc_ref + de_ref;
        note("cs", value(&cs.total), cs_ref);

        let classes = rng.random_range(2..=6);
        let p = random_distribution(&mut rng, b, classes);
        let q = random_distribution(&mut rng, b, classes);
        let kl = losses::bio_guided_loss(&ClassProbs(tensor(&p)), &ClassProbs(tensor(&q))).unwrap();
        let kl_ref = symmetric_kl(&p, &q);
        note("bio_kl", value(&kl), kl_ref);

        let y = random_labels(&mut rng, b, classes as u32);
        let ce_p = losses::cross_entropy(&ClassProbs(tensor(&p)), &y, 0.0).unwrap();
        note("ce", value(&ce_p), cross_entropy_probs(&p, &y));
        let z = random_mat(&mut rng, b, classes);
        let ce = losses::cross_entropy_logits(&tensor(&z), &y, 0.0).unwrap();
        let ce_ref = cross_entropy_logits(&z, &y);
        note("ce", value(&ce), ce_ref);

        let margin = rng.random_range(0.0..1.0);
        let tri = losses::triplet_loss(&tensor(&v), &y_i, margin).unwrap();
        let tri_ref = triplet(&v, &y_i, margin);
        note("triplet", value(&tri), tri_ref);

        let (to, tc) = (rows_of(&t_id, &y_i), rows_of(&t_clo, &y_c));
        let (to_t, tc_t, v_t, v2_t) = (tensor(&to), tensor(&tc), tensor(&v), tensor(&v2));
        let inp = Stage1Inputs {
            v_ori: &v_t,
            v_clo: &v2_t,
            t_id_rows: &to_t,
            t_clo_rows: &tc_t,
            y_i: &y_i,
            y_c: &y_c,
        };
        let s1 = losses::stage1_loss(&inp, sim).unwrap();
        note("stage1", value(&s1.total), stage1(&v, &v2, &t_id, &t_clo, &y_i, &y_c, tau));

        let s2 = losses::stage2_loss(ce, tri, cs.total, kl).unwrap();
        note("stage2", value(&s2.total), ce_ref + tri_ref + cs_ref + kl_ref);
    }
    worst
}

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between the autograd gradient
/// of `f` at `x` and a central difference with step `h`.
pub fn gradient_error(x: &Mat, h: f64, f: &dyn Fn(&Tensor) -> Tensor) -> f64 {
    let var = Var::from_tensor(&tensor(x)).unwrap();
    let loss = f(var.as_tensor());
    let grads = loss.backward().unwrap();
    let analytic = grads.get(var.as_tensor()).map(rows).unwrap_or_else(|| vec![vec![0.0; x[0].len()]; x.len()]);
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for i in 0..x.len() {
        for k in 0..x[i].len() {
            let mut plus = x.clone();
            plus[i][k] += h;
            let mut minus = x.clone();
            minus[i][k] -= h;
            let numeric = (value(&f(&tensor(&plus))) - value(&f(&tensor(&minus)))) / (2.0 * h);
            diff += (analytic[i][k] - numeric).powi(2);
            na += analytic[i][k].powi(2);
            nn += numeric.powi(2);
        }
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

/// Worst relative gradient error per differentiable loss over `instances`
/// random draws.
pub fn gradient_errors(instances: usize, seed: u64, h: f64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<(&'static str, f64)> = Vec::new();
    let mut note = |name: &'static str, e: f64| match out.iter_mut().find(|(n, _)| *n == name) {
        Some(slot) => slot.1 = slot.1.max(if e.is_nan() { f64::INFINITY } else { e }),
        None => out.push((name, e)),
    };
    for _ in 0..instances {
        let b = rng.random_range(2..=6);
        let d = rng.random_range(2..=8);
        let sim = SimilarityContext::new(rng.random_range(0.5..2.0)).unwrap();
        let v = random_mat(&mut rng, b, d);
        let other = random_mat(&mut rng, b, d);
        let t_id = random_mat(&mut rng, 4, d);
        let t_clo = random_mat(&mut rng, 3, d);
        let y_i = random_labels(&mut rng, b, 4);
        let y_c = random_labels(&mut rng, b, 3);
        let t_rows: Mat = y_i.iter().map(|&l| t_id[l as usize].clone()).collect();
        let (o, ti, tc, tr) = (tensor(&other), tensor(&t_id), tensor(&t_clo), tensor(&t_rows));

        note("i2t (image side)", gradient_error(&v, h, &|x| losses::i2t_contrastive(x, &ti, &y_i, sim).unwrap()));
        note("i2t (text side)", gradient_error(&t_id, h, &|x| losses::i2t_contrastive(&o, x, &y_i, sim).unwrap()));
        note("t2i (image side)", gradient_error(&v, h, &|x| losses::t2i_supervised_contrastive(x, &tr, &y_i, sim).unwrap()));
        note("t2i (text side)", gradient_error(&t_rows, h, &|x| losses::t2i_supervised_contrastive(&o, x, &y_i, sim).unwrap()));
        note("guide", gradient_error(&v, h, &|x| losses::guide_loss(x, &o, &ti, &tc, &y_i, &y_c).unwrap()));
        note("guide (clothing side)", gradient_error(&other, h, &|x| losses::guide_loss(&o, x, &ti, &tc, &y_i, &y_c).unwrap()));
        let target = tensor(&other);
        note("sc", gradient_error(&v, h, &|x| losses::spatial_consistency(x, &target).unwrap()));
        // keep every cosine clearly positive so the hinge is differentiable
        let near: Mat = v
            .iter()
            .zip(&other)
            .map(|(a, n)| a.iter().zip(n).map(|(x, y)| x + 0.3 * y).collect())
            .collect();
        let near_t = tensor(&near);
        note("de", gradient_error(&v, h, &|x| losses::decoupling_loss(x, &near_t).unwrap()));
        note("cs", gradient_error(&v, h, &|x| {
            let g = losses::guide_loss(x, &o, &ti, &tc, &y_i, &y_c).unwrap();
            let sc = losses::spatial_consistency(x, &target).unwrap();
            let de = losses::decoupling_loss(x, &near_t).unwrap();
            losses::clothing_stripping_loss(g, sc, de).unwrap().total
        }));

        let classes = rng.random_range(2..=5);
        let z = random_mat(&mut rng, b, classes);
        let zq = tensor(&random_mat(&mut rng, b, classes));
        note("bio_kl", gradient_error(&z, h, &|x| {
            let p = ClassProbs::from_logits(x).unwrap();
            let q = ClassProbs::from_logits(&zq).unwrap();
            losses::bio_guided_loss(&p, &q).unwrap()
        }));
        let y = random_labels(&mut rng, b, classes as u32);
        note("ce", gradient_error(&z, h, &|x| losses::cross_entropy_logits(x, &y, 0.0).unwrap()));

        // two identities with two samples each, margin large enough that every
        // hinge is active
        let f = random_mat(&mut rng, 4, d);
        let labels = [0u32, 0, 1, 1];
        note("triplet", gradient_error(&f, h, &|x| losses::triplet_loss(x, &labels, 5.0).unwrap()));
    }
    out
}
