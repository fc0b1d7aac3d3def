use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::sweeps::{metric_rows, RowLabel};
use super::{run_parallel, Location, SpanSource, SweepResult};
use crate::linalg::CovariancePair;
use crate::metrics::aggregate;
use crate::operators::{endpoint_mse, fit_operator, predict, FitConfig, Formulation, Rank, Solver};
use crate::snapshot::{stack_pairs, stack_residual_pairs, DataMatrixPair, SnapshotSpan};
use crate::stats::{fit_power_law, PowerLawForm};
use crate::{Error, Mat, PowerLaw, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by the value at the reference budget.
    Reference,
    /// Use raw values.
    None,
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::Reference => "reference",
            Normalization::None => "none",
        })
    }
}

impl FromStr for Normalization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(Normalization::Reference),
            "none" => Ok(Normalization::None),
            other => Err(Error::validation(format!("unknown normalization {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub p: usize,
    /// Ascending image budgets; the largest is the reference.
    pub budgets: Vec<usize>,
    pub formulations: Vec<Formulation>,
    pub solver: Solver,
    pub rank: Rank,
    pub alpha: f64,
    pub normalization: Normalization,
    pub form: PowerLawForm,
    pub jobs: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            p: 3,
            budgets: vec![10, 50, 100, 250, 500, 1000],
            formulations: vec![Formulation::Full, Formulation::Anchored],
            solver: Solver::Pcr,
            rank: Rank::Full,
            alpha: crate::DEFAULT_ALPHA,
            normalization: Normalization::Reference,
            form: PowerLawForm::Excess,
            jobs: 1,
        }
    }
}

/// One `(cut start, formulation, budget)` measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub cut_start: usize,
    pub formulation: Formulation,
    pub budget: usize,
    /// Held-out endpoint relative ℓ2.
    pub rel_l2: f64,
    /// `rel_l2` divided by its value at the reference budget.
    pub normalized: f64,
    /// Endpoint MSE on the calibration images.
    pub train_mse: f64,
    /// Endpoint MSE on the held-out images.
    pub eval_mse: f64,
    /// `train_mse − eval_mse`.
    pub gap: f64,
    /// `‖T̂_B/M_B − T̂_ref/M_ref‖_F` for the formulation's pair.
    pub cross_cov_dist: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveFit {
    pub formulation: Formulation,
    /// `None` for the curve of medians across cut starts.
    pub cut_start: Option<usize>,
    pub fit: Option<PowerLaw>,
    pub points: usize,
    pub note: Option<String>,
}

pub struct CalibrationReport {
    pub result: SweepResult,
    pub points: Vec<CalibrationPoint>,
    pub curves: Vec<CurveFit>,
    pub reference_budget: usize,
}

fn formulation_pair(span: &SnapshotSpan<f64>, f: Formulation) -> Result<DataMatrixPair<f64>> {
    match f {
        Formulation::Anchored => stack_residual_pairs(span),
        _ => stack_pairs(span),
    }
}

fn normalized_cross_cov(pair: &DataMatrixPair<f64>) -> Result<Mat> {
    let cov = CovariancePair::from_pair(pair, 0.0)?;
    Ok(cov.t / pair.samples() as f64)
}

/// Fits on growing image budgets and evaluates each fit on held-out images.
pub fn calibration_sweep(
    source: &dyn SpanSource,
    config: &CalibrationConfig,
) -> Result<CalibrationReport> {
    let p = config.p;
    if config.budgets.is_empty() {
        return Err(Error::validation(
            "calibration sweep needs at least one budget",
        ));
    }
    if config.budgets.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::validation("budgets must be strictly ascending"));
    }
    let available = source.calibration_size();
    let budgets: Vec<usize> = config
        .budgets
        .iter()
        .copied()
        .filter(|&b| b <= available)
        .collect();
    if budgets.len() < config.budgets.len() {
        log::warn!("dropping budgets above the {available} available calibration images");
    }
    let Some(&reference) = budgets.last() else {
        return Err(Error::validation(format!(
            "every budget exceeds the {available} available calibration images"
        )));
    };
    let mut tasks = Vec::new();
    for i in source.cut_starts(p) {
        for &f in &config.formulations {
            tasks.push((i, f));
        }
    }
    let outcomes = run_parallel(
        config.jobs,
        &tasks,
        |&(i, f)| -> Result<(Vec<super::SweepRow>, Vec<CalibrationPoint>)> {
            let eval = source.evaluation_span(i, p)?;
            let t_kept = eval.dims().t_kept();
            let fit_cfg = FitConfig::new(f, config.solver, config.rank, config.alpha);
            let t_ref = normalized_cross_cov(&formulation_pair(
                &source.calibration_span(i, p, Some(reference))?,
                f,
            )?)?;
            let mut rows = Vec::new();
            let mut points = Vec::new();
            for &b in &budgets {
                let cal = source.calibration_span(i, p, Some(b))?;
                let op = fit_operator(&cal, &fit_cfg)?;
                let label = RowLabel::of(&op, i, p, b);
                let pred = predict(&op, &eval, p)?;
                let new_rows = metric_rows(
                    &label,
                    p,
                    &pred,
                    eval.state(p),
                    t_kept,
                    None,
                    Location::Local,
                )?;
                let rel_l2 = new_rows[0].metrics.rel_l2;
                rows.extend(new_rows);
                let train_mse = endpoint_mse(&op, &cal)?;
                let eval_mse = endpoint_mse(&op, &eval)?;
                let t_b = normalized_cross_cov(&formulation_pair(&cal, f)?)?;
                points.push(CalibrationPoint {
                    cut_start: i,
                    formulation: f,
                    budget: b,
                    rel_l2,
                    normalized: f64::NAN,
                    train_mse,
                    eval_mse,
                    gap: train_mse - eval_mse,
                    cross_cov_dist: (t_b - &t_ref).norm(),
                });
            }
            let ref_value = points.last().map(|pt| pt.rel_l2).unwrap_or(f64::NAN);
            for pt in &mut points {
                pt.normalized = pt.rel_l2 / ref_value;
            }
            Ok((rows, points))
        },
    )?;

    let mut result = SweepResult::new("calib", source);
    let mut points = Vec::new();
    for ((i, f), out) in tasks.iter().zip(outcomes) {
        match out {
            Ok((rows, pts)) => {
                result.rows.extend(rows);
                points.extend(pts);
            }
            Err(e) => {
                let msg = format!("{f} at i = {i}, p = {p}: {e}");
                log::warn!("{msg}");
                result.failures.push(msg);
            }
        }
    }
    result.sort();
    result.validate()?;
    let curves = fit_calibration_curves(&points, config.normalization, config.form, reference);
    Ok(CalibrationReport {
        result,
        points,
        curves,
        reference_budget: reference,
    })
}

/// Analytic curve `1 + C/B^γ` standing in for measured errors.
pub fn planted_calibration(budgets: &[usize], c: f64, gamma: f64) -> Vec<CalibrationPoint> {
    let value = |b: usize| 1.0 + c / (b as f64).powf(gamma);
    let reference = budgets.iter().copied().max().map(value).unwrap_or(f64::NAN);
    budgets
        .iter()
        .map(|&b| CalibrationPoint {
            cut_start: 0,
            formulation: Formulation::Full,
            budget: b,
            rel_l2: value(b),
            normalized: value(b) / reference,
            train_mse: f64::NAN,
            eval_mse: f64::NAN,
            gap: f64::NAN,
            cross_cov_dist: f64::NAN,
        })
        .collect()
}

fn fit_curve(
    formulation: Formulation,
    cut_start: Option<usize>,
    pts: &[(usize, f64)],
    normalization: Normalization,
    form: PowerLawForm,
) -> CurveFit {
    // The quantity handed to the fitter must be positive after the form's offset.
    let offset = match (normalization, form) {
        (Normalization::Reference, PowerLawForm::Excess) => 1.0,
        _ => 0.0,
    };
    let floor = if form == PowerLawForm::Ratio {
        1.0
    } else {
        0.0
    };
    let usable: Vec<(f64, f64)> = pts
        .iter()
        .map(|&(b, v)| (b as f64, v - offset))
        .filter(|&(_, y)| y > floor && y.is_finite())
        .collect();
    let dropped = pts.len() - usable.len();
    let mut note = (dropped > 0).then(|| format!("{dropped} non-positive excess points dropped"));
    let fit = match fit_power_law(&usable, form) {
        Ok(f) => Some(f),
        Err(e) => {
            note = Some(format!("{}{e}", note.map(|n| n + "; ").unwrap_or_default()));
            None
        }
    };
    CurveFit {
        formulation,
        cut_start,
        fit,
        points: usable.len(),
        note,
    }
}

/// Power-law fits per `(formulation, cut start)` and for the median curve of
/// each formulation.
pub fn fit_calibration_curves(
    points: &[CalibrationPoint],
    normalization: Normalization,
    form: PowerLawForm,
    reference: usize,
) -> Vec<CurveFit> {
    let value = |pt: &CalibrationPoint| match normalization {
        Normalization::Reference => pt.normalized,
        Normalization::None => pt.rel_l2,
    };
    let keep =
        |pt: &CalibrationPoint| normalization == Normalization::None || pt.budget < reference;
    let mut per_cut: BTreeMap<(Formulation, usize), Vec<(usize, f64)>> = BTreeMap::new();
    let mut per_budget: BTreeMap<(Formulation, usize), Vec<f64>> = BTreeMap::new();
    for pt in points.iter().filter(|pt| keep(pt)) {
        per_cut
            .entry((pt.formulation, pt.cut_start))
            .or_default()
            .push((pt.budget, value(pt)));
        per_budget
            .entry((pt.formulation, pt.budget))
            .or_default()
            .push(value(pt));
    }
    let mut out: Vec<CurveFit> = per_cut
        .into_iter()
        .map(|((f, i), pts)| fit_curve(f, Some(i), &pts, normalization, form))
        .collect();
    let mut medians: BTreeMap<Formulation, Vec<(usize, f64)>> = BTreeMap::new();
    for ((f, b), vals) in per_budget {
        if let Ok(a) = aggregate(&vals) {
            medians.entry(f).or_default().push((b, a.median));
        }
    }
    out.extend(
        medians
            .into_iter()
            .map(|(f, pts)| fit_curve(f, None, &pts, normalization, form)),
    );
    out
}

impl CalibrationReport {
    pub fn write_points_csv<W: Write>(&self, sink: W) -> Result<()> {
        write_points_csv(&self.points, sink)
    }
}

pub fn write_points_csv<W: Write>(points: &[CalibrationPoint], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "cut_start",
        "formulation",
        "budget",
        "rel_l2",
        "normalized",
        "train_mse",
        "eval_mse",
        "gap",
        "cross_cov_dist",
    ])?;
    for pt in points {
        w.write_record([
            pt.cut_start.to_string(),
            pt.formulation.to_string(),
            pt.budget.to_string(),
            pt.rel_l2.to_string(),
            pt.normalized.to_string(),
            pt.train_mse.to_string(),
            pt.eval_mse.to_string(),
            pt.gap.to_string(),
            pt.cross_cov_dist.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
