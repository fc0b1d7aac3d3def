use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use spandmd::operators::{
    cabs, cut_distances, endpoint_mse, extract_modes, fit_operator, fit_pcr, fit_replaceme, fit_rrr,
    fuse_into_mlp, load_operator, modes_of, pair_mse, predict, save_operator, select_cut,
    sidecar_path, CutMeasure, FitConfig, Formulation, Rank, Solver,
};
use spandmd::snapshot::{stack_residual_pairs, DataMatrixPair, SnapshotSpan, SpanDims};
use spandmd::toymodel::{generate_linear_span, ToyBlockParams, ToySpec, CALIBRATION_STREAM};
use spandmd::{Error, LinearSystem, Mat, ToyModel};

fn gaussian(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

fn linear_span(d: usize, p: usize, seed: u64) -> (LinearSystem, SnapshotSpan<f64>) {
    let system = LinearSystem::random(d, 0.9, seed).unwrap();
    let dims = SpanDims::from_kept(d, 5, 10, p, 0, p, 0);
    let span = generate_linear_span(&system, dims, seed + 1).unwrap();
    (system, span)
}

fn cfg(f: Formulation, solver: Solver, rank: Rank, alpha: f64) -> FitConfig {
    FitConfig::new(f, solver, rank, alpha)
}

fn toy_span(i: usize, p: usize, images: usize) -> SnapshotSpan<f64> {
    let model = ToyModel::generate(ToySpec::default()).unwrap();
    model
        .forward_with_taps(&model.sample_inputs(images, CALIBRATION_STREAM), i, p)
        .unwrap()
}

/// Same span with the anchor replaced by zero, so the residual trajectory is
/// the raw one.
fn zero_anchor(span: &SnapshotSpan<f64>) -> SnapshotSpan<f64> {
    let dims = *span.dims();
    let zero = Mat::zeros(dims.d, dims.columns());
    SnapshotSpan::new(dims, span.states().to_vec(), Some(zero), Some(span.state(0).clone())).unwrap()
}

#[test]
fn pcr_full_rank_recovers_linear_system() {
    let (system, span) = linear_span(6, 4, 3);
    let op = fit_operator(&span, &cfg(Formulation::Full, Solver::Pcr, Rank::Full, 0.0)).unwrap();
    assert!((op.k() - system.k_star()).amax() < 1e-8);
}

#[test]
fn pcr_rank_one_follows_dominant_direction() {
    let k_star = gaussian(5, 5, 8) * 0.4;
    let u1 = DVector::from_vec(vec![1.0, 2.0, -1.0, 0.5, 0.0]).normalize();
    let w = gaussian(1, 60, 9);
    let z = &u1 * &w;
    let pair = DataMatrixPair::new(z.clone(), &k_star * &z).unwrap();
    let op = fit_pcr(&pair, 1, 0.0).unwrap();
    // Oracle: K★ restricted to and projected onto span{u1}.
    let oracle = &u1 * (u1.transpose() * &k_star * &u1);
    assert!((op.k() * &u1 - oracle).amax() < 1e-6);
}

#[test]
fn rrr_small_alpha_recovers_linear_system() {
    let (system, span) = linear_span(6, 4, 5);
    let op = fit_operator(&span, &cfg(Formulation::Full, Solver::Rrr, Rank::Full, 1e-10)).unwrap();
    assert!((op.k() - system.k_star()).amax() < 1e-6);
    assert!(op.provenance().ridge_equivalent);
}

#[test]
fn rrr_needs_positive_alpha() {
    let (_, span) = linear_span(4, 2, 1);
    assert!(fit_operator(&span, &cfg(Formulation::Full, Solver::Rrr, Rank::Full, 0.0)).is_err());
}

#[test]
fn identity_formulation_is_exactly_identity() {
    let span = toy_span(2, 2, 2);
    let op = fit_operator(&span, &cfg(Formulation::Identity, Solver::Pcr, Rank::Full, 1e-5)).unwrap();
    assert_eq!(*op.k(), Mat::identity(32, 32));
    for q in 1..=2 {
        assert_eq!(predict(&op, &span, q).unwrap(), *span.state(0));
    }
}

#[test]
fn anchored_collapses_to_full_with_zero_anchor() {
    let span = zero_anchor(&toy_span(3, 3, 4));
    for solver in [Solver::Pcr, Solver::Rrr] {
        let c = |f| cfg(f, solver, Rank::Full, 1e-5);
        let full = fit_operator(&span, &c(Formulation::Full)).unwrap();
        let anchored = fit_operator(&span, &c(Formulation::Anchored)).unwrap();
        assert!((full.k() - anchored.k()).amax() < 1e-10);
        let (a, b) = (predict(&full, &span, 3).unwrap(), predict(&anchored, &span, 3).unwrap());
        assert!((a - b).amax() < 1e-8);
    }
}

#[test]
fn linear_predictions_are_exact() {
    let (_, span) = linear_span(8, 6, 21);
    let op = fit_operator(&span, &cfg(Formulation::Full, Solver::Pcr, Rank::Full, 0.0)).unwrap();
    for q in 1..=6 {
        let pred = predict(&op, &span, q).unwrap();
        assert!((pred - span.state(q)).amax() < 1e-7, "q = {q}");
    }
}

#[test]
fn replaceme_one_step_matches_anchored() {
    let span = toy_span(4, 1, 8);
    let rm = fit_replaceme(&span, 0.0).unwrap();
    let anchored = fit_operator(&span, &cfg(Formulation::Anchored, Solver::Pcr, Rank::Full, 0.0)).unwrap();
    assert!((rm.k() - anchored.k()).amax() < 1e-8);
}

#[test]
fn replaceme_zero_target() {
    let d = 4;
    let dims = SpanDims::from_kept(d, 3, 4, 2, 1, 4, 0);
    let a = gaussian(d, 12, 1);
    let m = gaussian(d, 12, 2);
    let x = &a + &m;
    let span = SnapshotSpan::new(dims, vec![x, gaussian(d, 12, 3), a.clone()], Some(a), Some(m)).unwrap();
    let rm = fit_replaceme(&span, 0.0).unwrap();
    assert!(rm.k().amax() < 1e-10);
}

#[test]
fn replaceme_dominates_anchored_endpoint() {
    let span = toy_span(5, 3, 32);
    let fit = |f| fit_operator(&span, &cfg(f, Solver::Pcr, Rank::Full, 0.0)).unwrap();
    let rm = endpoint_mse(&fit(Formulation::Replaceme), &span).unwrap();
    let anchored = endpoint_mse(&fit(Formulation::Anchored), &span).unwrap();
    assert!(rm <= anchored);
}

#[test]
fn replaceme_only_predicts_endpoint() {
    let span = toy_span(5, 3, 2);
    let rm = fit_replaceme(&span, 1e-5).unwrap();
    assert!(predict(&rm, &span, 3).is_ok());
    assert!(matches!(predict(&rm, &span, 2), Err(Error::UnsupportedStep { .. })));
}

#[test]
fn missing_taps_rejected() {
    let (_, span) = linear_span(4, 2, 1);
    let bare = SnapshotSpan::new(*span.dims(), span.states().to_vec(), None, None).unwrap();
    let err = fit_operator(&bare, &cfg(Formulation::Anchored, Solver::Pcr, Rank::Full, 0.0));
    assert!(matches!(err, Err(Error::Formulation(_))));
}

#[test]
fn rank_above_d_is_clipped() {
    let (_, span) = linear_span(4, 2, 1);
    let op = fit_operator(&span, &cfg(Formulation::Full, Solver::Pcr, Rank::Fixed(9), 0.0)).unwrap();
    assert!(op.provenance().rank_clipped);
    assert_eq!(op.effective_rank(), 4);
}

#[test]
fn diagonal_spectrum() {
    let k = Mat::from_diagonal(&DVector::from_vec(vec![0.5, 2.0]));
    let modes = modes_of(k, Mat::identity(2, 2)).unwrap();
    assert_relative_eq!(modes.eigenvalues[0].re, 2.0, epsilon = 1e-12);
    assert_relative_eq!(modes.eigenvalues[1].re, 0.5, epsilon = 1e-12);
    assert!(!modes.defective);
}

#[test]
fn rotation_spectrum() {
    let theta: f64 = 0.7;
    let k = Mat::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()]);
    let modes = modes_of(k, Mat::identity(2, 2)).unwrap();
    let want = [Complex::from_polar(1.0, theta), Complex::from_polar(1.0, -theta)];
    for (got, want) in modes.eigenvalues.iter().zip(want) {
        assert!(cabs(got - want) < 1e-8, "{got} vs {want}");
    }
}

#[test]
fn lifted_spectrum_matches_dense_eigensolver() {
    let (_, span) = linear_span(6, 4, 13);
    let op = fit_operator(&span, &cfg(Formulation::Full, Solver::Pcr, Rank::Full, 1e-6)).unwrap();
    let modes = extract_modes(&op, 6).unwrap();
    let ours: f64 = modes.eigenvalues.iter().map(|l| cabs(*l)).sum();
    let dense: f64 = op.k().complex_eigenvalues().iter().map(|l| l.norm()).sum();
    assert!((ours - dense).abs() < 1e-6);
    // Each lifted mode satisfies K φ = λ φ.
    let phi = modes.modes.as_ref().unwrap();
    let kc = op.k().map(|v| Complex::new(v, 0.0));
    for (j, lam) in modes.eigenvalues.iter().enumerate() {
        let col = phi.column(j).into_owned();
        let resid = &kc * &col - col.scale(1.0) * *lam;
        assert!(resid.iter().map(|c| c.norm()).fold(0.0, f64::max) < 1e-8);
    }
}

#[test]
fn fusion_with_scalar_maps() {
    let w = gaussian(3, 5, 1);
    let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
    let (w1, b1) = fuse_into_mlp(&Mat::identity(3, 3), &w, &b).unwrap();
    assert_eq!((w1, b1), (w.clone(), b.clone()));
    let (w2, b2) = fuse_into_mlp(&(Mat::identity(3, 3) * 2.0), &w, &b).unwrap();
    assert_eq!((w2, b2), (w * 2.0, b * 2.0));
}

#[test]
fn fused_mlp_matches_composed_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut block = ToyBlockParams::<f64>::random(&mut rng, 16, 4, 32).unwrap();
    let t = gaussian(16, 16, 18) * 0.3;
    let y = gaussian(16, 100, 19);
    let reference = &t * block.mlp(&y);
    let (w, b) = fuse_into_mlp(&t, &block.w_out, &block.b_out).unwrap();
    block.w_out = w;
    block.b_out = b;
    let fused = block.mlp(&y);
    for j in 0..100 {
        let (a, r) = (fused.column(j), reference.column(j));
        assert!((a - r).norm() <= 1e-6 * r.norm());
    }
}

#[test]
fn cut_selection_rules() {
    assert_eq!(select_cut(&[0.5, 0.2, 0.9]).unwrap(), 1);
    assert_eq!(select_cut(&[0.3, 0.3]).unwrap(), 0);
    assert!(select_cut(&[]).is_err());
}

#[test]
fn cut_scan_matches_brute_force() {
    let model = ToyModel::generate(ToySpec::default()).unwrap();
    let trace = model.trace(&model.sample_inputs(4, CALIBRATION_STREAM)).unwrap();
    let states: Vec<Mat> = (0..=model.depth()).map(|l| trace.kept_state(l)).collect();
    let p = 3;
    let h = cut_distances(&states, p, CutMeasure::RelL2).unwrap();
    assert_eq!(h.len(), model.depth() - p + 1);
    let mut best = (f64::INFINITY, 0);
    for l in 0..=model.depth() - p {
        let (a, b) = (&states[l], &states[l + p]);
        let mean: f64 = (0..a.ncols())
            .map(|j| (a.column(j) - b.column(j)).norm() / b.column(j).norm())
            .sum::<f64>()
            / a.ncols() as f64;
        assert_relative_eq!(h[l], mean, max_relative = 1e-12);
        if mean < best.0 {
            best = (mean, l);
        }
    }
    assert_eq!(select_cut(&h).unwrap(), best.1);
}

#[test]
fn operator_files_round_trip_and_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let span = toy_span(2, 3, 4);
    let c = cfg(Formulation::Anchored, Solver::Rrr, Rank::Fixed(8), 1e-5);
    let a = fit_operator(&span, &c).unwrap();
    let b = fit_operator(&span, &c).unwrap();
    let (pa, pb) = (dir.path().join("a.json"), dir.path().join("b.json"));
    save_operator(&a, &pa).unwrap();
    save_operator(&b, &pb).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap().len(), std::fs::read(&pb).unwrap().len());
    assert_eq!(std::fs::read(sidecar_path(&pa)).unwrap(), std::fs::read(sidecar_path(&pb)).unwrap());
    let back = load_operator(&pa).unwrap();
    assert_eq!(back.k(), a.k());
    assert_eq!(back.basis(), a.basis());
    assert_eq!(back.config(), a.config());
    assert_eq!(back.effective_rank(), 8);
    assert_eq!(predict(&back, &span, 3).unwrap(), predict(&a, &span, 3).unwrap());

    let side = sidecar_path(&pa);
    let bytes = std::fs::read(&side).unwrap();
    std::fs::write(&side, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(load_operator(&pa), Err(Error::Truncated { .. })));
}

fn nonlinear_pair(d: usize, samples: usize, seed: u64) -> DataMatrixPair<f64> {
    let z = gaussian(d, samples, seed);
    let a = gaussian(d, d, seed + 1) * (1.0 / (d as f64).sqrt());
    let zp = (&a * &z).map(|v| v.tanh() + 0.1 * v * v);
    DataMatrixPair::new(z, zp).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pcr_on_identity_dynamics_is_a_projector(seed in 0u64..1000, d in 2usize..7, r in 1usize..7) {
        let r = r.min(d);
        let z = gaussian(d, 3 * d, seed);
        let pair = DataMatrixPair::new(z.clone(), z.clone()).unwrap();
        let op = fit_pcr(&pair, r, 0.0).unwrap();
        let u = z.svd(true, false).u.unwrap();
        let ur = u.columns(0, r);
        prop_assert!((op.k() * ur - ur).amax() < 1e-8);
    }

    #[test]
    fn full_rank_solvers_agree(seed in 0u64..1000, d in 2usize..7, extra in 1usize..40, alpha in 1e-6f64..1.0) {
        let pair = nonlinear_pair(d, d + extra, seed);
        let pcr = fit_pcr(&pair, d, alpha).unwrap();
        let rrr = fit_rrr(&pair, d, alpha).unwrap();
        let (a, b) = (pcr.k() * &pair.z, rrr.k() * &pair.z);
        prop_assert!((&a - &b).norm() <= 1e-6 * a.norm());
    }

    #[test]
    fn rrr_wins_rank_constrained_objective(seed in 0u64..1000, d in 3usize..8, r in 1usize..7) {
        let r = r.min(d - 1);
        let pair = nonlinear_pair(d, 20 * d, seed);
        let pcr = fit_pcr(&pair, r, 1e-10).unwrap();
        let rrr = fit_rrr(&pair, r, 1e-10).unwrap();
        prop_assert!(pair_mse(rrr.k(), &pair) <= pair_mse(pcr.k(), &pair) + 1e-9);
    }

    #[test]
    fn pcr_train_mse_non_increasing_in_rank(seed in 0u64..1000, d in 2usize..7) {
        let pair = nonlinear_pair(d, 10 * d, seed);
        let mut last = f64::INFINITY;
        for r in 1..=d {
            let mse = pair_mse(fit_pcr(&pair, r, 0.0).unwrap().k(), &pair);
            prop_assert!(mse <= last + 1e-12);
            last = mse;
        }
    }

    #[test]
    fn residual_stacking_feeds_anchored_fit(seed in 0u64..200) {
        let (_, span) = linear_span(4, 3, seed);
        let pair = stack_residual_pairs(&span).unwrap();
        let op = fit_operator(&span, &cfg(Formulation::Anchored, Solver::Pcr, Rank::Full, 1e-4)).unwrap();
        let direct = fit_pcr(&pair, 4, 1e-4).unwrap();
        prop_assert!((op.k() - direct.k()).amax() < 1e-12);
    }
}
