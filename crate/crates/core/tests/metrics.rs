use approx::assert_relative_eq;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use spandmd::metrics::{
    aggregate, cosine_similarity, evaluate, norm_ratio, r2_brh, relative_l2, TokenGroup,
    TokenPartition,
};
use spandmd::toymodel::{ToySpec, CALIBRATION_STREAM, EVALUATION_STREAM};
use spandmd::{Mat, ToyModel};

fn gaussian(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

#[test]
fn cosine_reference_values() {
    let x = gaussian(6, 4, 1);
    assert_relative_eq!(cosine_similarity(&x, &x).unwrap(), 1.0, epsilon = 1e-14);
    assert_relative_eq!(cosine_similarity(&-&x, &x).unwrap(), -1.0, epsilon = 1e-14);
    assert_relative_eq!(cosine_similarity(&(&x * 2.0), &x).unwrap(), 1.0, epsilon = 1e-14);
}

#[test]
fn relative_l2_reference_values() {
    let x = gaussian(6, 4, 2);
    assert_eq!(relative_l2(&x, &x).unwrap(), 0.0);
    assert_relative_eq!(relative_l2(&Mat::zeros(6, 4), &x).unwrap(), 1.0, epsilon = 1e-14);
    assert_relative_eq!(relative_l2(&-&x, &x).unwrap(), 2.0, epsilon = 1e-14);
}

#[test]
fn r2_reference_values() {
    let x = gaussian(6, 4, 3);
    assert_relative_eq!(r2_brh(&x, &x).unwrap(), 1.0, epsilon = 1e-14);
    assert_relative_eq!(r2_brh(&x.add_scalar(7.0), &x).unwrap(), 1.0, epsilon = 1e-12);
    // Centered parts orthogonal per token.
    let truth = DMatrix::from_column_slice(4, 1, &[1.0, -1.0, 0.0, 0.0]);
    let pred = DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 1.0, -1.0]);
    assert_relative_eq!(r2_brh(&pred, &truth).unwrap(), 0.0, epsilon = 1e-15);
}

#[test]
fn norm_ratio_reference_values() {
    let x = gaussian(6, 4, 4);
    assert_relative_eq!(norm_ratio(&x, &x).unwrap(), 1.0, epsilon = 1e-14);
    assert_relative_eq!(norm_ratio(&(&x * 3.0), &x).unwrap(), 3.0, epsilon = 1e-14);
    assert_eq!(norm_ratio(&Mat::zeros(6, 4), &x).unwrap(), 0.0);
}

#[test]
fn zero_truth_token_is_degenerate() {
    let mut truth = gaussian(3, 3, 5);
    truth.column_mut(1).fill(0.0);
    assert!(relative_l2(&gaussian(3, 3, 6), &truth).is_err());
}

#[test]
fn whole_partition_matches_direct_calls() {
    let (pred, truth) = (gaussian(5, 12, 7), gaussian(5, 12, 8));
    let recs = evaluate(&pred, &truth, 4, None).unwrap();
    assert_eq!(recs.len(), 1);
    let m = recs[0].1;
    assert_eq!(m.cos, cosine_similarity(&pred, &truth).unwrap());
    assert_eq!(m.rel_l2, relative_l2(&pred, &truth).unwrap());
    assert_eq!(m.r2, r2_brh(&pred, &truth).unwrap());
    assert_eq!(m.norm_ratio, norm_ratio(&pred, &truth).unwrap());
}

#[test]
fn cls_group_matches_sliced_arrays() {
    let model = ToyModel::generate(ToySpec::default()).unwrap();
    let t_kept = model.spec().t_kept();
    let a = model.trace(&model.sample_inputs(6, CALIBRATION_STREAM)).unwrap().kept_state(5);
    let b = model.trace(&model.sample_inputs(6, EVALUATION_STREAM)).unwrap().kept_state(5);
    let part = TokenPartition::cls_patch(t_kept, 0).unwrap();
    let recs = evaluate(&a, &b, t_kept, Some(&part)).unwrap();
    let cls_cols: Vec<usize> = (0..6).map(|img| img * t_kept).collect();
    let (sa, sb) = (a.select_columns(&cls_cols), b.select_columns(&cls_cols));
    assert_eq!(recs[0].0, "cls");
    assert_relative_eq!(recs[0].1.cos, cosine_similarity(&sa, &sb).unwrap(), epsilon = 1e-14);
    assert_relative_eq!(recs[0].1.rel_l2, relative_l2(&sa, &sb).unwrap(), epsilon = 1e-14);
}

#[test]
fn partitions_reject_overlap_and_gaps() {
    let g = |name: &str, tokens: Vec<usize>| TokenGroup { name: name.into(), tokens };
    assert!(TokenPartition::new(3, vec![g("a", vec![0, 1]), g("b", vec![1, 2])]).is_err());
    assert!(TokenPartition::new(3, vec![g("a", vec![0])]).is_err());
}

#[test]
fn aggregate_quartiles() {
    let a = aggregate(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    assert_eq!((a.median, a.q25, a.q75), (3.0, 2.0, 4.0));
    let s = aggregate(&[0.25]).unwrap();
    assert_eq!((s.median, s.q25, s.q75), (0.25, 0.25, 0.25));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let u: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
    assert!((aggregate(&u).unwrap().median - 0.5).abs() < 0.05);
}

proptest! {
    #[test]
    fn group_means_recombine(seed in 0u64..500, t_kept in 2usize..7, images in 1usize..4, split in 1usize..6) {
        let split = split.min(t_kept - 1);
        let cols = t_kept * images;
        let (pred, truth) = (gaussian(4, cols, seed), gaussian(4, cols, seed + 1000));
        let part = TokenPartition::new(t_kept, vec![
            TokenGroup { name: "a".into(), tokens: (0..split).collect() },
            TokenGroup { name: "b".into(), tokens: (split..t_kept).collect() },
        ]).unwrap();
        let recs = evaluate(&pred, &truth, t_kept, Some(&part)).unwrap();
        let whole = evaluate(&pred, &truth, t_kept, None).unwrap()[0].1;
        let (na, nb) = ((split * images) as f64, ((t_kept - split) * images) as f64);
        let mix = |x: f64, y: f64| (na * x + nb * y) / (na + nb);
        let (a, b) = (recs[0].1, recs[1].1);
        prop_assert!((mix(a.cos, b.cos) - whole.cos).abs() < 1e-12);
        prop_assert!((mix(a.rel_l2, b.rel_l2) - whole.rel_l2).abs() < 1e-12);
        prop_assert!((mix(a.r2, b.r2) - whole.r2).abs() < 1e-12);
        prop_assert!((mix(a.norm_ratio, b.norm_ratio) - whole.norm_ratio).abs() < 1e-12);
    }

    #[test]
    fn metric_invariances(seed in 0u64..500, scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
        let (pred, truth) = (gaussian(5, 6, seed), gaussian(5, 6, seed + 1000));
        let cos = cosine_similarity(&pred, &truth).unwrap();
        prop_assert!((cosine_similarity(&(&pred * scale), &truth).unwrap() - cos).abs() < 1e-12);
        prop_assert!(cos.abs() <= 1.0 + 1e-12);
        let r2 = r2_brh(&pred, &truth).unwrap();
        prop_assert!((r2_brh(&pred.add_scalar(shift), &truth.add_scalar(-shift)).unwrap() - r2).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&r2));
        let nr = norm_ratio(&pred, &truth).unwrap();
        prop_assert!((norm_ratio(&(&pred * scale), &truth).unwrap() - scale * nr).abs() < 1e-12 * scale.max(1.0) * nr.max(1.0));
        prop_assert!(relative_l2(&pred, &truth).unwrap() >= 0.0);
    }
}
