use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::{Error, Result};

/// Attached to every ordering test.
pub const CAVEAT: &str =
    "adjacent configurations share evaluation data, so this test is a coarse ordering check";

/// Two-tailed Nemenyi critical values for k = 2..=10.
const Q_05: [f64; 9] = [
    1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164,
];
const Q_10: [f64; 9] = [
    1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920,
];

const EPS: f64 = 1e-16;
const MAX_TERMS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Better {
    Higher,
    Lower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FriedmanResult {
    /// Mean rank per method, 1 = best.
    pub avg_ranks: Vec<f64>,
    pub chi2: f64,
    pub p_value: f64,
    /// `log10 p`, finite even where `p_value` underflows to 0.
    pub log10_p: f64,
    pub n: usize,
    pub k: usize,
    pub alpha: f64,
    pub cd: f64,
    pub caveat: String,
}

/// Nemenyi `q_α` for `k` methods (`α ∈ {0.05, 0.10}`, `2 ≤ k ≤ 10`).
pub fn nemenyi_q(k: usize, alpha: f64) -> Result<f64> {
    let table = if (alpha - 0.05).abs() < 1e-12 {
        &Q_05
    } else if (alpha - 0.10).abs() < 1e-12 {
        &Q_10
    } else {
        return Err(Error::validation(format!(
            "Nemenyi table only covers alpha 0.05 and 0.10, got {alpha}"
        )));
    };
    if !(2..=10).contains(&k) {
        return Err(Error::validation(format!(
            "Nemenyi table covers 2..=10 methods, got {k}"
        )));
    }
    Ok(table[k - 2])
}

/// `CD = q_α √(k(k+1)/(6n))`.
pub fn critical_difference(k: usize, n: usize, alpha: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::validation("critical difference needs n >= 1"));
    }
    let kf = k as f64;
    Ok(nemenyi_q(k, alpha)? * (kf * (kf + 1.0) / (6.0 * n as f64)).sqrt())
}

/// Ranks of one row, 1 = best, ties averaged.
pub fn rank_row(values: &[f64], better: Better) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let c = values[a]
            .partial_cmp(&values[b])
            .unwrap_or(std::cmp::Ordering::Equal);
        match better {
            Better::Lower => c,
            Better::Higher => c.reverse(),
        }
    });
    let mut ranks = vec![0.0; values.len()];
    let mut s = 0;
    while s < order.len() {
        let mut e = s + 1;
        while e < order.len() && values[order[e]] == values[order[s]] {
            e += 1;
        }
        let avg = (s + 1 + e) as f64 / 2.0;
        for &j in &order[s..e] {
            ranks[j] = avg;
        }
        s = e;
    }
    ranks
}

/// `ln Q(a, x)` for the regularized upper incomplete gamma function.
fn ln_gamma_q(a: f64, x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let ln_prefix = -x + a * x.ln() - ln_gamma(a);
    if x < a + 1.0 {
        // P(a, x) by its power series; Q = 1 − P.
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..MAX_TERMS {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * EPS {
                break;
            }
        }
        let p = (ln_prefix + sum.ln()).exp();
        (-p).ln_1p()
    } else {
        // Q(a, x) by its continued fraction (modified Lentz).
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..MAX_TERMS {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < EPS {
                break;
            }
        }
        ln_prefix + h.ln()
    }
}

fn check_chi_domain(x: f64, df: f64) -> Result<()> {
    if !(x >= 0.0) || !x.is_finite() || !(df >= 1.0) || !df.is_finite() {
        return Err(Error::validation(format!(
            "chi-square tail needs x >= 0 and df >= 1, got x = {x}, df = {df}"
        )));
    }
    Ok(())
}

/// Upper tail `P(χ²_df > x)`.
pub fn chi_square_sf(x: f64, df: f64) -> Result<f64> {
    check_chi_domain(x, df)?;
    Ok(ln_gamma_q(df / 2.0, x / 2.0).exp())
}

/// `log10 P(χ²_df > x)`, usable where the tail underflows.
pub fn chi_square_log10_sf(x: f64, df: f64) -> Result<f64> {
    check_chi_domain(x, df)?;
    Ok(ln_gamma_q(df / 2.0, x / 2.0) / std::f64::consts::LN_10)
}

/// Friedman test over an `n × k` score matrix (rows are datasets, columns
/// methods) with the Nemenyi critical difference.
pub fn friedman_nemenyi(
    scores: &DMatrix<f64>,
    better: Better,
    alpha: f64,
) -> Result<FriedmanResult> {
    let (n, k) = scores.shape();
    if n < 2 || k < 2 {
        return Err(Error::validation(format!(
            "Friedman test needs n >= 2 and k >= 2, got {n} x {k}"
        )));
    }
    if scores.iter().any(|v| v.is_nan()) {
        return Err(Error::validation("score matrix holds NaN"));
    }
    let cd = critical_difference(k, n, alpha)?;
    let mut sums = vec![0.0; k];
    for r in 0..n {
        let row: Vec<f64> = scores.row(r).iter().copied().collect();
        for (j, rk) in rank_row(&row, better).into_iter().enumerate() {
            sums[j] += rk;
        }
    }
    let (nf, kf) = (n as f64, k as f64);
    let avg_ranks: Vec<f64> = sums.iter().map(|s| s / nf).collect();
    let sq: f64 = avg_ranks.iter().map(|r| r * r).sum();
    let chi2 = (12.0 * nf / (kf * (kf + 1.0)) * (sq - kf * (kf + 1.0).powi(2) / 4.0)).max(0.0);
    let df = kf - 1.0;
    let log10_p = chi_square_log10_sf(chi2, df)?;
    let p_value = chi_square_sf(chi2, df)?.clamp(0.0, 1.0);
    Ok(FriedmanResult {
        avg_ranks,
        chi2,
        p_value,
        log10_p,
        n,
        k,
        alpha,
        cd,
        caveat: CAVEAT.into(),
    })
}

fn format_p(r: &FriedmanResult) -> String {
    if r.p_value >= 1e-300 {
        format!("{:.3e}", r.p_value)
    } else {
        format!("10^{:.1}", r.log10_p)
    }
}

/// CSV with one row per method: `method,avg_rank,cd,chi2,p_value,log10_p,n,k`.
pub fn write_table_csv<W: Write>(
    result: &FriedmanResult,
    methods: &[String],
    sink: W,
) -> Result<()> {
    if methods.len() != result.k {
        return Err(Error::validation(format!(
            "{} method names for {} methods",
            methods.len(),
            result.k
        )));
    }
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "method", "avg_rank", "cd", "chi2", "p_value", "log10_p", "n", "k",
    ])?;
    for (m, r) in methods.iter().zip(&result.avg_ranks) {
        w.write_record([
            m.clone(),
            format!("{r:.6}"),
            format!("{:.6}", result.cd),
            format!("{:.6}", result.chi2),
            format!("{:e}", result.p_value),
            format!("{:.6}", result.log10_p),
            result.n.to_string(),
            result.k.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Fixed-width text table, methods sorted by average rank.
pub fn render_table(result: &FriedmanResult, methods: &[String]) -> String {
    let mut order: Vec<usize> = (0..result.k).collect();
    order.sort_by(|&a, &b| {
        result.avg_ranks[a]
            .partial_cmp(&result.avg_ranks[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let width = methods.iter().map(|m| m.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:<width$}  {:>8}\n", "method", "avg rank");
    for j in order {
        let name = methods.get(j).map(String::as_str).unwrap_or("?");
        out.push_str(&format!("{:<width$}  {:>8.3}\n", name, result.avg_ranks[j]));
    }
    out.push_str(&format!(
        "n = {}, k = {}, CD({}) = {:.3}, chi2_F = {:.2}, p = {}\nnote: {}\n",
        result.n,
        result.k,
        result.alpha,
        result.cd,
        result.chi2,
        format_p(result),
        result.caveat
    ));
    out
}
