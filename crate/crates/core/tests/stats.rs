use approx::assert_relative_eq;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use spandmd::stats::{
    candidate_constants, chi_square_log10_sf, chi_square_sf, critical_difference, fit_power_law,
    friedman_nemenyi, render_table, write_table_csv, Better, PowerLawForm,
};

fn planted(c: f64, gamma: f64, budgets: &[f64]) -> Vec<(f64, f64)> {
    budgets.iter().map(|&b| (b, c / b.powf(gamma))).collect()
}

#[test]
fn exact_power_laws() {
    let fit = fit_power_law(&planted(5.0, 1.0, &[10.0, 50.0, 100.0, 500.0]), PowerLawForm::Excess).unwrap();
    assert!((fit.c - 5.0).abs() < 1e-6 && (fit.gamma - 1.0).abs() < 1e-6);
    assert!(fit.converged);
    let fit = fit_power_law(&planted(3.0, 0.5, &[10.0, 50.0, 100.0, 500.0]), PowerLawForm::Excess).unwrap();
    assert!((fit.gamma - 0.5).abs() < 1e-6);
}

#[test]
fn ratio_form_subtracts_one() {
    let pts: Vec<(f64, f64)> = planted(5.0, 1.0, &[10.0, 50.0, 100.0, 250.0])
        .into_iter()
        .map(|(b, y)| (b, 1.0 + y))
        .collect();
    let fit = fit_power_law(&pts, PowerLawForm::Ratio).unwrap();
    assert!((fit.c - 5.0).abs() < 1e-4 && (fit.gamma - 1.0).abs() < 1e-6);
    assert_relative_eq!(fit.eval(10.0), 1.5, epsilon = 1e-6);
}

#[test]
fn noisy_power_law_twenty_points() {
    let budgets: Vec<f64> = (0..20).map(|j| 10.0 * 100f64.powf(j as f64 / 19.0)).collect();
    for (c, gamma) in [(5.0, 1.0), (3.0, 0.5)] {
        let clean = planted(c, gamma, &budgets);
        let mut hits = 0;
        for trial in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let noisy: Vec<(f64, f64)> = clean
                .iter()
                .map(|&(b, y)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (b, y * (1.0 + 0.05 * z))
                })
                .collect();
            if (fit_power_law(&noisy, PowerLawForm::Excess).unwrap().gamma - gamma).abs() <= 0.1 {
                hits += 1;
            }
        }
        assert!(hits >= 95, "({c}, {gamma}): {hits}/100");
    }
}

#[test]
fn power_law_rejects_non_positive_values() {
    assert!(fit_power_law(&[(10.0, 1.0), (20.0, -0.5), (30.0, 0.2)], PowerLawForm::Excess).is_err());
    assert!(fit_power_law(&[(10.0, 1.0)], PowerLawForm::Excess).is_err());
}

#[test]
fn candidate_constants_printed_values() {
    let c = candidate_constants(1280, 197, 5).unwrap();
    assert_eq!(format!("{:.2} {:.2}", c.d_over_t, c.d_over_tp), "6.50 1.30");
    let c = candidate_constants(1536, 257, 5).unwrap();
    assert_eq!(format!("{:.2} {:.2}", c.d_over_t, c.d_over_tp), "5.98 1.20");
    let unit = candidate_constants(1, 1, 1).unwrap();
    assert!(unit.named().iter().all(|(_, v)| *v == 1.0));
    assert!(candidate_constants(0, 1, 1).is_err());
}

#[test]
fn nemenyi_critical_differences() {
    for (n, want) in [(245, 0.300), (325, 0.260), (165, 0.365)] {
        assert!((critical_difference(4, n, 0.05).unwrap() - want).abs() <= 1e-3, "n = {n}");
    }
}

#[test]
fn consistent_orderings_are_significant() {
    let scores = DMatrix::from_fn(20, 3, |r, c| 3.0 - c as f64 + 0.01 * r as f64);
    let res = friedman_nemenyi(&scores, Better::Higher, 0.05).unwrap();
    assert_eq!(res.avg_ranks, vec![1.0, 2.0, 3.0]);
    // χ² = 12n/(k(k+1)) Σ R̄² − 3n(k+1) = 40, and the df = 2 tail is e^{-x/2}.
    assert_relative_eq!(res.chi2, 40.0, epsilon = 1e-10);
    assert_relative_eq!(res.p_value, (-20.0f64).exp(), max_relative = 1e-10);
    assert!(res.p_value < 1e-6);

    // Under random row orderings the statistic essentially never reaches 40.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut reached = 0;
    for _ in 0..2000 {
        let shuffled = DMatrix::from_fn(20, 3, |_, _| 0.0);
        let mut m = shuffled;
        for r in 0..20 {
            let mut perm = [1.0, 2.0, 3.0];
            perm.shuffle(&mut rng);
            for c in 0..3 {
                m[(r, c)] = perm[c];
            }
        }
        if friedman_nemenyi(&m, Better::Higher, 0.05).unwrap().chi2 >= 40.0 - 1e-9 {
            reached += 1;
        }
    }
    assert_eq!(reached, 0);
}

#[test]
fn lower_is_better_flips_ranks() {
    let scores = DMatrix::from_row_slice(3, 2, &[0.1, 0.5, 0.2, 0.4, 0.3, 0.9]);
    let res = friedman_nemenyi(&scores, Better::Lower, 0.05).unwrap();
    assert_eq!(res.avg_ranks, vec![1.0, 2.0]);
}

#[test]
fn table_outputs_carry_cd_and_caveat() {
    let scores = DMatrix::from_fn(10, 4, |r, c| (c * 7 + r * 3) as f64 % 5.0);
    let res = friedman_nemenyi(&scores, Better::Higher, 0.05).unwrap();
    let names: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
    let text = render_table(&res, &names);
    assert!(text.contains("CD(0.05)"));
    assert!(text.contains(&res.caveat));
    let mut buf = Vec::new();
    write_table_csv(&res, &names, &mut buf).unwrap();
    let csv = String::from_utf8(buf).unwrap();
    assert!(csv.starts_with("method,avg_rank,cd,chi2,p_value,log10_p,n,k\n"));
    assert_eq!(csv.lines().count(), 5);
}

/// Composite Simpson integral of the χ² density with 3 degrees of freedom,
/// after substituting `t = u²` to remove the square-root cusp at zero.
fn chi2_3_cdf(x: f64) -> f64 {
    let f = |u: f64| 2.0 * u * u * (-u * u / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let (n, top) = (20_000, x.sqrt());
    let h = top / n as f64;
    let mut s = f(0.0) + f(top);
    for j in 1..n {
        s += f(j as f64 * h) * if j % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn chi_square_tail_values() {
    assert_eq!(chi_square_sf(0.0, 4.0).unwrap(), 1.0);
    assert_relative_eq!(chi_square_sf(2.0 * 2f64.ln(), 2.0).unwrap(), 0.5, epsilon = 1e-14);
    let sf = chi_square_sf(7.815, 3.0).unwrap();
    assert!((sf - 0.05).abs() < 5e-4);
    assert!((sf - (1.0 - chi2_3_cdf(7.815))).abs() < 1e-7);
}

#[test]
fn chi_square_log_tail_survives_underflow() {
    let l = chi_square_log10_sf(5000.0, 3.0).unwrap();
    assert!(l.is_finite() && l < -500.0);
    // df = 2 closed form: log10 e^{-x/2}.
    assert_relative_eq!(chi_square_log10_sf(3000.0, 2.0).unwrap(), -1500.0 / std::f64::consts::LN_10, max_relative = 1e-10);
}

proptest! {
    #[test]
    fn planted_laws_recovered(c in 0.1f64..50.0, gamma in 0.2f64..2.0) {
        let fit = fit_power_law(&planted(c, gamma, &[10.0, 50.0, 100.0, 250.0, 500.0, 1000.0]), PowerLawForm::Excess).unwrap();
        prop_assert!((fit.gamma - gamma).abs() < 1e-6);
        prop_assert!((fit.c - c).abs() < 1e-6 * c.max(1.0));
    }

    #[test]
    fn chi_square_tail_is_monotone(x in 0.0f64..60.0, dx in 0.01f64..5.0, df in 1usize..12) {
        let df = df as f64;
        let a = chi_square_sf(x, df).unwrap();
        let b = chi_square_sf(x + dx, df).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(b <= a);
    }

    #[test]
    fn average_ranks_sum_to_constant(seed in 0u64..500, n in 2usize..15, k in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores = DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(&mut rng));
        let res = friedman_nemenyi(&scores, Better::Higher, 0.05).unwrap();
        let total: f64 = res.avg_ranks.iter().sum();
        prop_assert!((total - (k * (k + 1)) as f64 / 2.0).abs() < 1e-9);
    }
}
