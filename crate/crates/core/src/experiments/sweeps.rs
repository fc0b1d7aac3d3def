use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{run_parallel, FitRecord, Location, SpanSource, SweepResult, SweepRow};
use crate::metrics::{self, MetricRecord, TokenPartition};
use crate::operators::{fit_operator, predict, FitConfig, Formulation, Rank, Solver};
use crate::snapshot::SnapshotSpan;
use crate::{Error, Operator, Result};

/// Steps at which an operator of this formulation is evaluated.
pub(crate) fn eval_steps(formulation: Formulation, p: usize) -> Vec<usize> {
    if formulation == Formulation::Replaceme {
        vec![p]
    } else {
        (1..=p).collect()
    }
}

/// Row labels that do not depend on the evaluation itself.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RowLabel {
    pub cut_start: usize,
    pub prune_length: usize,
    pub formulation: Formulation,
    pub solver: Option<Solver>,
    pub rank: Rank,
    pub alpha: f64,
    pub budget: usize,
}

impl RowLabel {
    pub(crate) fn of(op: &Operator, cut_start: usize, prune_length: usize, budget: usize) -> Self {
        let c = op.config();
        let learned_dmd = c.formulation.is_dmd();
        Self {
            cut_start,
            prune_length,
            formulation: c.formulation,
            solver: learned_dmd.then_some(c.solver),
            rank: if learned_dmd { c.rank } else { Rank::Full },
            alpha: if c.formulation == Formulation::Identity {
                0.0
            } else {
                c.alpha
            },
            budget,
        }
    }

    pub(crate) fn row(
        &self,
        step: usize,
        token_group: String,
        metrics: MetricRecord,
        location: Location,
        diverged: bool,
    ) -> SweepRow {
        SweepRow {
            cut_start: self.cut_start,
            prune_length: self.prune_length,
            step,
            formulation: self.formulation,
            solver: self.solver,
            rank: self.rank,
            alpha: self.alpha,
            budget: self.budget,
            token_group,
            metrics,
            location,
            diverged,
        }
    }

    pub(crate) fn fit_record(&self, op: &Operator) -> FitRecord {
        FitRecord {
            cut_start: self.cut_start,
            prune_length: self.prune_length,
            formulation: self.formulation,
            solver: self.solver,
            rank: self.rank,
            alpha: self.alpha,
            budget: self.budget,
            effective_rank: op.effective_rank(),
            train_mse: op.train_mse(),
        }
    }
}

/// Metric rows comparing `pred` with `truth`; non-finite predictions become
/// sentinel rows flagged as diverged.
pub(crate) fn metric_rows(
    label: &RowLabel,
    step: usize,
    pred: &DMatrix<f64>,
    truth: &DMatrix<f64>,
    t_kept: usize,
    partition: Option<&TokenPartition>,
    location: Location,
) -> Result<Vec<SweepRow>> {
    if pred.iter().all(|v| v.is_finite()) {
        let recs = metrics::evaluate(pred, truth, t_kept, partition)?;
        if recs.iter().all(|(_, m)| m.is_finite()) {
            return Ok(recs
                .into_iter()
                .map(|(g, m)| label.row(step, g, m, location, false))
                .collect());
        }
    }
    let whole = TokenPartition::whole(t_kept);
    let groups = partition.unwrap_or(&whole).groups();
    let images = truth.ncols() / t_kept;
    Ok(groups
        .iter()
        .map(|g| {
            label.row(
                step,
                g.name.clone(),
                MetricRecord::sentinel(g.tokens.len() * images),
                location,
                true,
            )
        })
        .collect())
}

fn evaluate_operator(
    op: &Operator,
    label: &RowLabel,
    span: &SnapshotSpan<f64>,
    steps: &[usize],
    partition: Option<&TokenPartition>,
) -> Result<Vec<SweepRow>> {
    let t_kept = span.dims().t_kept();
    let mut rows = Vec::new();
    for &q in steps {
        let pred = predict(op, span, q)?;
        rows.extend(metric_rows(
            label,
            q,
            &pred,
            span.state(q),
            t_kept,
            partition,
            Location::Local,
        )?);
    }
    Ok(rows)
}

fn budget_of(source: &dyn SpanSource, budget: Option<usize>) -> usize {
    budget.unwrap_or_else(|| source.calibration_size())
}

/// A fitted operator kept for reuse by later protocols.
#[derive(Debug, Clone)]
pub struct BankEntry {
    pub cut_start: usize,
    pub prune_length: usize,
    pub budget: usize,
    pub op: Operator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadlineConfig {
    pub p_values: Vec<usize>,
    pub formulations: Vec<Formulation>,
    pub solver: Solver,
    pub rank: Rank,
    pub alpha: f64,
    /// Calibration images; all available if `None`.
    pub budget: Option<usize>,
    pub jobs: usize,
}

impl Default for HeadlineConfig {
    fn default() -> Self {
        Self {
            p_values: (1..=10).collect(),
            formulations: Formulation::ALL.to_vec(),
            solver: Solver::Pcr,
            rank: Rank::Full,
            alpha: crate::DEFAULT_ALPHA,
            budget: None,
            jobs: 1,
        }
    }
}

pub struct HeadlineRun {
    pub result: SweepResult,
    pub bank: Vec<BankEntry>,
}

fn fail_message(what: &str, i: usize, p: usize, e: &Error) -> String {
    let msg = format!("{what} at i = {i}, p = {p}: {e}");
    log::warn!("{msg}");
    msg
}

/// Fits every formulation at every `(i, p)` and evaluates it on held-out
/// images at each step it supports.
pub fn headline_sweep(source: &dyn SpanSource, config: &HeadlineConfig) -> Result<HeadlineRun> {
    if config.p_values.is_empty() || config.formulations.is_empty() {
        return Err(Error::validation(
            "headline sweep needs at least one p and one formulation",
        ));
    }
    let mut tasks = Vec::new();
    for &p in &config.p_values {
        let starts = source.cut_starts(p);
        if starts.is_empty() {
            log::warn!("no cut start supports p = {p}");
        }
        for i in starts {
            for &f in &config.formulations {
                tasks.push((i, p, f));
            }
        }
    }
    let budget = budget_of(source, config.budget);
    let outcomes = run_parallel(
        config.jobs,
        &tasks,
        |&(i, p, f)| -> Result<(Vec<SweepRow>, BankEntry)> {
            let fit_cfg = FitConfig::new(f, config.solver, config.rank, config.alpha);
            let cal = source.calibration_span(i, p, config.budget)?;
            let op = fit_operator(&cal, &fit_cfg)?;
            let eval = source.evaluation_span(i, p)?;
            let label = RowLabel::of(&op, i, p, budget);
            let rows = evaluate_operator(&op, &label, &eval, &eval_steps(f, p), None)?;
            Ok((
                rows,
                BankEntry {
                    cut_start: i,
                    prune_length: p,
                    budget,
                    op,
                },
            ))
        },
    )?;

    let mut result = SweepResult::new("headline", source);
    let mut bank = Vec::new();
    for ((i, p, f), out) in tasks.iter().zip(outcomes) {
        match out {
            Ok((rows, entry)) => {
                let label = RowLabel::of(&entry.op, *i, *p, budget);
                result.fits.push(label.fit_record(&entry.op));
                result.rows.extend(rows);
                bank.push(entry);
            }
            Err(e) => result
                .failures
                .push(fail_message(&format!("{f}"), *i, *p, &e)),
        }
    }
    result.sort();
    result.validate()?;
    Ok(HeadlineRun { result, bank })
}

/// Re-evaluates banked operators under a token partition (CLS / patch by
/// default) without refitting.
pub fn token_breakdown(
    source: &dyn SpanSource,
    bank: &[BankEntry],
    partition: Option<&TokenPartition>,
    jobs: usize,
) -> Result<SweepResult> {
    let outcomes = run_parallel(jobs, bank, |entry| -> Result<Vec<SweepRow>> {
        let eval = source.evaluation_span(entry.cut_start, entry.prune_length)?;
        let dims = eval.dims();
        let default;
        let part = match partition {
            Some(p) => p,
            None => {
                default = TokenPartition::cls_patch(dims.t_kept(), dims.cls_index)?;
                &default
            }
        };
        let label = RowLabel::of(&entry.op, entry.cut_start, entry.prune_length, entry.budget);
        evaluate_operator(
            &entry.op,
            &label,
            &eval,
            &eval_steps(entry.op.formulation(), entry.prune_length),
            Some(part),
        )
    })?;
    let mut result = SweepResult::new("tokens", source);
    for (entry, out) in bank.iter().zip(outcomes) {
        match out {
            Ok(rows) => result.rows.extend(rows),
            Err(e) => result.failures.push(fail_message(
                "token breakdown",
                entry.cut_start,
                entry.prune_length,
                &e,
            )),
        }
    }
    result.sort();
    result.validate()?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankConfig {
    pub p: usize,
    /// Ranks to fit; `Rank::Full` is always added.
    pub ranks: Vec<Rank>,
    pub solvers: Vec<Solver>,
    pub formulations: Vec<Formulation>,
    pub alpha: f64,
    pub budget: Option<usize>,
    pub jobs: usize,
}

impl Default for RankConfig {
    fn default() -> Self {
        Self {
            p: 3,
            ranks: [1, 2, 4, 8, 16].into_iter().map(Rank::Fixed).collect(),
            solvers: vec![Solver::Pcr, Solver::Rrr],
            formulations: vec![Formulation::Full, Formulation::Anchored],
            alpha: crate::DEFAULT_ALPHA,
            budget: None,
            jobs: 1,
        }
    }
}

/// RRR minus PCR at matched `(i, formulation, rank)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankDelta {
    pub cut_start: usize,
    pub formulation: Formulation,
    pub rank: Rank,
    pub d_cos: f64,
    pub d_rel_l2: f64,
}

pub struct RankReport {
    pub result: SweepResult,
    pub deltas: Vec<RankDelta>,
}

/// Fits at each rank and solver and evaluates the endpoint `q = p`.
pub fn rank_sweep(source: &dyn SpanSource, config: &RankConfig) -> Result<RankReport> {
    let p = config.p;
    let starts = source.cut_starts(p);
    let Some(&first) = starts.first() else {
        return Err(Error::validation(format!("no cut start supports p = {p}")));
    };
    let d = source.evaluation_span(first, p)?.dims().d;
    let mut ranks = config.ranks.clone();
    if let Some(Rank::Fixed(r)) = ranks
        .iter()
        .find(|r| matches!(r, Rank::Fixed(n) if *n > d || *n == 0))
    {
        return Err(Error::validation(format!("rank {r} outside 1..={d}")));
    }
    ranks.push(Rank::Full);
    ranks.sort();
    ranks.dedup();
    if let Some(f) = config.formulations.iter().find(|f| !f.is_dmd()) {
        return Err(Error::validation(format!(
            "rank sweep applies to DMD formulations, got {f}"
        )));
    }

    let mut tasks = Vec::new();
    for &i in &starts {
        for &f in &config.formulations {
            for &s in &config.solvers {
                for &r in &ranks {
                    tasks.push((i, f, s, r));
                }
            }
        }
    }
    let budget = budget_of(source, config.budget);
    let outcomes = run_parallel(
        config.jobs,
        &tasks,
        |&(i, f, s, r)| -> Result<(Vec<SweepRow>, FitRecord)> {
            let cal = source.calibration_span(i, p, config.budget)?;
            let op = fit_operator(&cal, &FitConfig::new(f, s, r, config.alpha))?;
            let eval = source.evaluation_span(i, p)?;
            let label = RowLabel {
                rank: r,
                ..RowLabel::of(&op, i, p, budget)
            };
            let rows = evaluate_operator(&op, &label, &eval, &[p], None)?;
            Ok((rows, label.fit_record(&op)))
        },
    )?;

    let mut result = SweepResult::new("rank", source);
    for ((i, f, s, r), out) in tasks.iter().zip(outcomes) {
        match out {
            Ok((rows, fit)) => {
                result.rows.extend(rows);
                result.fits.push(fit);
            }
            Err(e) => result
                .failures
                .push(fail_message(&format!("{f}/{s} rank {r}"), *i, p, &e)),
        }
    }
    result.sort();
    result.validate()?;

    let mut by_key: BTreeMap<(usize, Formulation, Rank), [Option<MetricRecord>; 2]> =
        BTreeMap::new();
    for row in &result.rows {
        let slot = match row.solver {
            Some(Solver::Pcr) => 0,
            Some(Solver::Rrr) => 1,
            None => continue,
        };
        by_key
            .entry((row.cut_start, row.formulation, row.rank))
            .or_default()[slot] = Some(row.metrics);
    }
    let deltas = by_key
        .into_iter()
        .filter_map(|((cut_start, formulation, rank), [pcr, rrr])| {
            let (pcr, rrr) = (pcr?, rrr?);
            Some(RankDelta {
                cut_start,
                formulation,
                rank,
                d_cos: rrr.cos - pcr.cos,
                d_rel_l2: rrr.rel_l2 - pcr.rel_l2,
            })
        })
        .collect();
    Ok(RankReport { result, deltas })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationConfig {
    /// Cut starts; every start with a one-step span if `None`.
    pub starts: Option<Vec<usize>>,
    pub max_n: usize,
    pub solver: Solver,
    pub alpha: f64,
    pub budget: Option<usize>,
    pub jobs: usize,
}

impl Default for ExtrapolationConfig {
    fn default() -> Self {
        Self {
            starts: None,
            max_n: 10,
            solver: Solver::Pcr,
            alpha: crate::DEFAULT_ALPHA,
            budget: None,
            jobs: 1,
        }
    }
}

/// Fits a one-step full operator `T_i` at each start and compares `T_i^n X_i`
/// with `X_{i+n}`. Rows use `prune_length = step = n`.
pub fn extrapolation_sweep(
    source: &dyn SpanSource,
    config: &ExtrapolationConfig,
) -> Result<SweepResult> {
    if config.max_n == 0 {
        return Err(Error::validation("max_n must be at least 1"));
    }
    let starts = config
        .starts
        .clone()
        .unwrap_or_else(|| source.cut_starts(1));
    let budget = budget_of(source, config.budget);
    let outcomes = run_parallel(
        config.jobs,
        &starts,
        |&i| -> Result<(Vec<SweepRow>, FitRecord)> {
            let avail = source.depth().saturating_sub(i).min(config.max_n);
            if avail == 0 {
                return Err(Error::validation(format!("no block after start {i}")));
            }
            if avail < config.max_n {
                log::warn!(
                    "start {i}: only {avail} of {} extrapolation steps fit in depth {}",
                    config.max_n,
                    source.depth()
                );
            }
            let cal = source.calibration_span(i, 1, config.budget)?;
            let op = fit_operator(
                &cal,
                &FitConfig::new(Formulation::Full, config.solver, Rank::Full, config.alpha),
            )?;
            let eval = source.evaluation_span(i, avail)?;
            let t_kept = eval.dims().t_kept();
            let mut rows = Vec::new();
            for n in 1..=avail {
                let label = RowLabel::of(&op, i, n, budget);
                let pred = predict(&op, &eval, n)?;
                rows.extend(metric_rows(
                    &label,
                    n,
                    &pred,
                    eval.state(n),
                    t_kept,
                    None,
                    Location::Local,
                )?);
            }
            Ok((rows, RowLabel::of(&op, i, 1, budget).fit_record(&op)))
        },
    )?;
    let mut result = SweepResult::new("extrap", source);
    for (i, out) in starts.iter().zip(outcomes) {
        match out {
            Ok((rows, fit)) => {
                result.rows.extend(rows);
                result.fits.push(fit);
            }
            Err(e) => result
                .failures
                .push(fail_message("extrapolation", *i, 1, &e)),
        }
    }
    result.sort();
    result.validate()?;
    Ok(result)
}
