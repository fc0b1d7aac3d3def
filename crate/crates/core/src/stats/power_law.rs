use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

const MAX_ITER: usize = 200;
const STEP_TOL: f64 = 1e-12;
const MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerLawForm {
    /// `C / B^γ`.
    Excess,
    /// `1 + C / B^γ`.
    Ratio,
}

impl fmt::Display for PowerLawForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PowerLawForm::Excess => "excess",
            PowerLawForm::Ratio => "ratio",
        })
    }
}

impl FromStr for PowerLawForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "excess" => Ok(PowerLawForm::Excess),
            "ratio" => Ok(PowerLawForm::Ratio),
            other => Err(Error::validation(format!(
                "unknown power-law form {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit<T: Scalar> {
    pub c: T,
    pub gamma: T,
    /// Sum of squared log-space residuals `Σ (ln y − ln ŷ)²`.
    pub residual: T,
    pub form: PowerLawForm,
    pub converged: bool,
    pub iterations: usize,
}

impl<T: Scalar> PowerLawFit<T> {
    pub fn eval(&self, b: T) -> T {
        let excess = self.c / b.powf(self.gamma);
        match self.form {
            PowerLawForm::Excess => excess,
            PowerLawForm::Ratio => T::one() + excess,
        }
    }
}

fn ssr(bs: &[f64], ys: &[f64], ln_c: f64, gamma: f64) -> f64 {
    bs.iter()
        .zip(ys)
        .map(|(b, y)| (y - (ln_c - gamma * b.ln()).exp()).powi(2))
        .sum()
}

/// Ordinary least squares of `ln y` on `ln B`: returns `(ln C, γ)`.
fn log_log_init(bs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = bs.len() as f64;
    let xs: Vec<f64> = bs.iter().map(|b| b.ln()).collect();
    let ls: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let ml = ls.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ls).map(|(x, l)| (x - mx) * (l - ml)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (ml - slope * mx, -slope)
}

/// Fits `C/B^γ` (or `1 + C/B^γ`) to `(B, value)` points by Gauss–Newton on
/// linear-space residuals, started from the log-log regression.
pub fn fit_power_law<T: Scalar>(points: &[(T, T)], form: PowerLawForm) -> Result<PowerLawFit<T>> {
    if points.len() < 3 {
        return Err(Error::validation(format!(
            "power-law fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    let bs: Vec<f64> = points.iter().map(|p| p.0.as_f64()).collect();
    let offset = if form == PowerLawForm::Ratio {
        1.0
    } else {
        0.0
    };
    let ys: Vec<f64> = points.iter().map(|p| p.1.as_f64() - offset).collect();
    if bs.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
        return Err(Error::validation("budgets must be positive and finite"));
    }
    if bs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::validation("budgets must be strictly increasing"));
    }
    if let Some(y) = ys.iter().find(|y| !(**y > 0.0 && y.is_finite())) {
        return Err(Error::validation(format!(
            "{form} form needs positive excess values, got {y}"
        )));
    }

    let (mut ln_c, mut gamma) = log_log_init(&bs, &ys);
    let init = (ln_c, gamma);
    let mut cur = ssr(&bs, &ys, ln_c, gamma);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITER {
        iterations += 1;
        // Normal equations of the 2-parameter problem in (ln C, γ).
        let (mut a11, mut a12, mut a22, mut g1, mut g2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (b, y) in bs.iter().zip(&ys) {
            let f = (ln_c - gamma * b.ln()).exp();
            let r = y - f;
            let (j1, j2) = (f, -f * b.ln());
            a11 += j1 * j1;
            a12 += j1 * j2;
            a22 += j2 * j2;
            g1 += j1 * r;
            g2 += j2 * r;
        }
        let det = a11 * a22 - a12 * a12;
        if !(det.abs() > 0.0) || !det.is_finite() {
            break;
        }
        let mut d1 = (a22 * g1 - a12 * g2) / det;
        let mut d2 = (a11 * g2 - a12 * g1) / det;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let trial = ssr(&bs, &ys, ln_c + d1, gamma + d2);
            if trial <= cur {
                ln_c += d1;
                gamma += d2;
                cur = trial;
                accepted = true;
                break;
            }
            d1 *= 0.5;
            d2 *= 0.5;
        }
        if !accepted || (d1 * d1 + d2 * d2).sqrt() < STEP_TOL {
            // No descent direction left: the iterate is a numerical minimum.
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("power-law fit did not converge in {MAX_ITER} iterations; returning log-log initialization");
        (ln_c, gamma) = init;
    }
    let residual: f64 = bs
        .iter()
        .zip(&ys)
        .map(|(b, y)| (y.ln() - (ln_c - gamma * b.ln())).powi(2))
        .sum();
    Ok(PowerLawFit {
        c: T::lit(ln_c.exp()),
        gamma: T::lit(gamma),
        residual: T::lit(residual),
        form,
        converged,
        iterations,
    })
}

/// The four dimensional candidates for the power-law amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateConstants {
    pub d_over_tp: f64,
    pub d_over_t: f64,
    pub d2_over_tp: f64,
    pub d2_over_t: f64,
}

impl CandidateConstants {
    pub fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("d/(tp)", self.d_over_tp),
            ("d/t", self.d_over_t),
            ("d^2/(tp)", self.d2_over_tp),
            ("d^2/t", self.d2_over_t),
        ]
    }

    /// `(name, candidate, empirical / candidate)` for each candidate.
    pub fn ratios(&self, empirical_c: f64) -> Vec<(&'static str, f64, f64)> {
        self.named()
            .iter()
            .map(|&(n, v)| (n, v, empirical_c / v))
            .collect()
    }
}

pub fn candidate_constants(d: usize, t: usize, p: usize) -> Result<CandidateConstants> {
    if d == 0 || t == 0 || p == 0 {
        return Err(Error::validation(format!(
            "d, t, p must be positive (got {d}, {t}, {p})"
        )));
    }
    let (d, t, p) = (d as f64, t as f64, p as f64);
    Ok(CandidateConstants {
        d_over_tp: d / (t * p),
        d_over_t: d / t,
        d2_over_tp: d * d / (t * p),
        d2_over_t: d * d / t,
    })
}
