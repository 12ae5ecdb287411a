mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ccreid::encoders::ClassProbs;
use ccreid::losses::{self, SimilarityContext, Stage1Inputs};

use common::*;

fn sim(tau: f64) -> SimilarityContext {
    SimilarityContext::new(tau).unwrap()
}

#[test]
fn every_loss_matches_its_scalar_reference() {
    for (name, err) in suites::loss_oracle_errors(100, 1) {
        assert!(err < 1e-6, "{name}: {err:e}");
    }
}

#[test]
fn i2t_identity_similarities() {
    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let v = value(&losses::i2t_contrastive(&tensor(&eye), &tensor(&eye), &[0, 1], sim(1.0)).unwrap());
    let e = std::f64::consts::E;
    assert!((v - -(e / (e + 1.0)).ln()).abs() < 1e-12);
    assert!((v - 0.3133).abs() < 1e-4);
}

#[test]
fn t2i_two_positives_is_ln2() {
    let same = vec![vec![0.3, -0.4], vec![0.3, -0.4]];
    let v = value(&losses::t2i_supervised_contrastive(&tensor(&same), &tensor(&same), &[1, 1], sim(1.0)).unwrap());
    assert!((v - std::f64::consts::LN_2).abs() < 1e-6);
}

#[test]
fn t2i_single_sample_is_zero() {
    let x = vec![vec![0.3, -0.4]];
    let v = value(&losses::t2i_supervised_contrastive(&tensor(&x), &tensor(&x), &[0], sim(1.0)).unwrap());
    assert!(v.abs() < 1e-12);
}

#[test]
fn symmetric_kl_anchor() {
    let p = vec![vec![0.8, 0.2]];
    let q = vec![vec![0.6, 0.4]];
    let v = value(&losses::bio_guided_loss(&ClassProbs(tensor(&p)), &ClassProbs(tensor(&q))).unwrap());
    assert!((v - 0.19617).abs() < 1e-4);
    assert!((v - symmetric_kl(&p, &q)).abs() < 1e-12);
}

#[test]
fn triplet_identical_features_give_margin() {
    let f = vec![vec![1.0, 2.0]; 4];
    let v = value(&losses::triplet_loss(&tensor(&f), &[0, 0, 1, 1], 0.3).unwrap());
    assert!((v - 0.3).abs() < 1e-12);
}

#[test]
fn stage1_single_sample_is_zero() {
    let v = tensor(&vec![vec![0.5, 0.1, -0.2]]);
    let inp = Stage1Inputs {
        v_ori: &v,
        v_clo: &v,
        t_id_rows: &v,
        t_clo_rows: &v,
        y_i: &[0],
        y_c: &[0],
    };
    let s = losses::stage1_loss(&inp, sim(1.0)).unwrap();
    assert!(value(&s.total).abs() < 1e-12);
}

#[test]
fn non_positive_temperature_is_rejected() {
    assert!(SimilarityContext::new(0.0).is_err());
    assert!(SimilarityContext::new(-1.0).is_err());
}

fn case(seed: u64) -> (Mat, Mat, Mat, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = 2 + (seed % 5) as usize;
    let v = random_mat(&mut rng, b, 4);
    let w = random_mat(&mut rng, b, 4);
    let t = random_mat(&mut rng, 3, 4);
    let y = random_labels(&mut rng, b, 3);
    (v, w, t, y)
}

fn permute(m: &Mat, p: &[usize]) -> Mat {
    p.iter().map(|&i| m[i].clone()).collect()
}

proptest! {
    #[test]
    fn t2i_is_invariant_to_batch_order(seed in 0u64..500, shift in 1usize..6) {
        let (v, _, t, y) = case(seed);
        let rows: Mat = y.iter().map(|&l| t[l as usize].clone()).collect();
        let n = v.len();
        let p: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let yp: Vec<u32> = p.iter().map(|&i| y[i]).collect();
        let a = value(&losses::t2i_supervised_contrastive(&tensor(&v), &tensor(&rows), &y, sim(1.0)).unwrap());
        let b = value(&losses::t2i_supervised_contrastive(&tensor(&permute(&v, &p)), &tensor(&permute(&rows, &p)), &yp, sim(1.0)).unwrap());
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn decoupling_lies_in_unit_interval(seed in 0u64..500) {
        let (v, w, _, _) = case(seed);
        let d = value(&losses::decoupling_loss(&tensor(&v), &tensor(&w)).unwrap());
        prop_assert!((0.0..=1.0 + 1e-12).contains(&d));
    }

    #[test]
    fn symmetric_kl_is_symmetric_and_non_negative(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_distribution(&mut rng, 3, 4);
        let q = random_distribution(&mut rng, 3, 4);
        let pq = value(&losses::bio_guided_loss(&ClassProbs(tensor(&p)), &ClassProbs(tensor(&q))).unwrap());
        let qp = value(&losses::bio_guided_loss(&ClassProbs(tensor(&q)), &ClassProbs(tensor(&p))).unwrap());
        prop_assert!(pq >= 0.0);
        prop_assert!((pq - qp).abs() < 1e-12);
    }

    #[test]
    fn triplet_is_non_negative(seed in 0u64..500, margin in 0.0f64..2.0) {
        let (v, _, _, y) = case(seed);
        let l = value(&losses::triplet_loss(&tensor(&v), &y, margin).unwrap());
        prop_assert!(l >= 0.0);
    }

    #[test]
    fn i2t_scale_invariant_in_embedding_norm(seed in 0u64..500, scale in 0.1f64..10.0) {
        let (v, _, t, y) = case(seed);
        let scaled: Mat = v.iter().map(|r| r.iter().map(|x| x * scale).collect()).collect();
        let a = value(&losses::i2t_contrastive(&tensor(&v), &tensor(&t), &y, sim(1.0)).unwrap());
        let b = value(&losses::i2t_contrastive(&tensor(&scaled), &tensor(&t), &y, sim(1.0)).unwrap());
        prop_assert!((a - b).abs() < 1e-9);
    }
}
