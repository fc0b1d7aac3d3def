//! Batch protocols over a [`SpanSource`]: headline, rank, calibration,
//! extrapolation, downstream, token-group and PCA sweeps.
//!
//! Every sweep returns rows sorted by key, so identical inputs give identical
//! CSV bytes regardless of how many worker threads computed them.

mod calibration;
mod downstream;
mod pca;
mod source;
mod sweeps;

pub use calibration::{
    calibration_sweep, fit_calibration_curves, planted_calibration, write_points_csv,
    CalibrationConfig, CalibrationPoint, CalibrationReport, CurveFit, Normalization,
};
pub use downstream::{
    downstream_eval, downstream_metrics, spearman, DownstreamReport, MethodOrdering,
    DIVERGED_REL_L2,
};
pub use pca::{pca_sweep, pca_trajectory_export, MethodTrajectory, PcaRow, PcaTable, TRUTH};
pub use source::{
    FileSource, LinearSource, SpanSource, ToySource, DEFAULT_CALIBRATION_IMAGES,
    DEFAULT_EVALUATION_IMAGES,
};
pub use sweeps::{
    extrapolation_sweep, headline_sweep, rank_sweep, token_breakdown, BankEntry,
    ExtrapolationConfig, HeadlineConfig, HeadlineRun, RankConfig, RankDelta, RankReport,
};

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::metrics::{aggregate, AggregateStat, MetricRecord};
use crate::operators::{Formulation, Rank, Solver};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    /// At the operator output `X_{i+q}`.
    Local,
    /// At the final hidden state after the remaining blocks.
    Downstream,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Location::Local => "local",
            Location::Downstream => "downstream",
        })
    }
}

/// One evaluated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cut_start: usize,
    pub prune_length: usize,
    pub step: usize,
    pub formulation: Formulation,
    /// `None` for the identity, which has no solver.
    pub solver: Option<Solver>,
    pub rank: Rank,
    pub alpha: f64,
    pub budget: usize,
    pub token_group: String,
    pub metrics: MetricRecord,
    pub location: Location,
    pub diverged: bool,
}

/// Column order of the CSV emission.
pub const CSV_COLUMNS: [&str; 16] = [
    "cut_start",
    "prune_length",
    "step",
    "formulation",
    "solver",
    "rank",
    "alpha",
    "budget",
    "token_group",
    "cos",
    "rel_l2",
    "r2",
    "norm_ratio",
    "n_tokens",
    "location",
    "diverged",
];

impl SweepRow {
    fn solver_str(&self) -> &'static str {
        self.solver.map_or("none", |s| s.as_str())
    }

    fn key_cmp(&self, other: &Self) -> Ordering {
        self.location
            .cmp(&other.location)
            .then_with(|| self.token_group.cmp(&other.token_group))
            .then_with(|| self.formulation.cmp(&other.formulation))
            .then_with(|| self.solver.cmp(&other.solver))
            .then_with(|| self.rank.cmp(&other.rank))
            .then_with(|| self.alpha.total_cmp(&other.alpha))
            .then_with(|| self.budget.cmp(&other.budget))
            .then_with(|| self.prune_length.cmp(&other.prune_length))
            .then_with(|| self.cut_start.cmp(&other.cut_start))
            .then_with(|| self.step.cmp(&other.step))
    }

    fn csv_record(&self) -> Vec<String> {
        let m = &self.metrics;
        vec![
            self.cut_start.to_string(),
            self.prune_length.to_string(),
            self.step.to_string(),
            self.formulation.to_string(),
            self.solver_str().to_string(),
            self.rank.to_string(),
            self.alpha.to_string(),
            self.budget.to_string(),
            self.token_group.clone(),
            m.cos.to_string(),
            m.rel_l2.to_string(),
            m.r2.to_string(),
            m.norm_ratio.to_string(),
            m.n_tokens.to_string(),
            self.location.to_string(),
            self.diverged.to_string(),
        ]
    }

    fn from_csv_record(rec: &csv::StringRecord) -> Result<Self> {
        if rec.len() != CSV_COLUMNS.len() {
            return Err(Error::validation(format!(
                "expected {} columns, got {}",
                CSV_COLUMNS.len(),
                rec.len()
            )));
        }
        let num = |j: usize| -> Result<usize> {
            rec[j].parse().map_err(|_| {
                Error::validation(format!(
                    "column {} is not a count: {:?}",
                    CSV_COLUMNS[j], &rec[j]
                ))
            })
        };
        let real = |j: usize| -> Result<f64> {
            rec[j].parse().map_err(|_| {
                Error::validation(format!(
                    "column {} is not a number: {:?}",
                    CSV_COLUMNS[j], &rec[j]
                ))
            })
        };
        Ok(Self {
            cut_start: num(0)?,
            prune_length: num(1)?,
            step: num(2)?,
            formulation: rec[3].parse()?,
            solver: if &rec[4] == "none" {
                None
            } else {
                Some(rec[4].parse()?)
            },
            rank: rec[5].parse()?,
            alpha: real(6)?,
            budget: num(7)?,
            token_group: rec[8].to_string(),
            metrics: MetricRecord {
                cos: real(9)?,
                rel_l2: real(10)?,
                r2: real(11)?,
                norm_ratio: real(12)?,
                n_tokens: num(13)?,
            },
            location: match &rec[14] {
                "local" => Location::Local,
                "downstream" => Location::Downstream,
                other => return Err(Error::validation(format!("unknown location {other:?}"))),
            },
            diverged: rec[15]
                .parse()
                .map_err(|_| Error::validation(format!("bad diverged flag {:?}", &rec[15])))?,
        })
    }

    /// The method label used in summaries: formulation plus solver for DMD.
    pub fn method(&self) -> String {
        match (self.formulation.is_dmd(), self.solver) {
            (true, Some(s)) => format!("{}/{}", self.formulation, s),
            _ => self.formulation.to_string(),
        }
    }
}

/// Fit-side record for audit: what each operator achieved on its own data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub cut_start: usize,
    pub prune_length: usize,
    pub formulation: Formulation,
    pub solver: Option<Solver>,
    pub rank: Rank,
    pub alpha: f64,
    pub budget: usize,
    pub effective_rank: usize,
    pub train_mse: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepProvenance {
    pub sweep: String,
    pub source: String,
    pub seeds: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub fits: Vec<FitRecord>,
    pub provenance: SweepProvenance,
    /// Per-configuration failures, one message each.
    pub failures: Vec<String>,
}

/// Median/IQR of one metric group across cut starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub location: Location,
    pub token_group: String,
    pub method: String,
    pub prune_length: usize,
    pub step: usize,
    pub budget: usize,
    pub rank: Rank,
    pub cos: AggregateStat,
    pub rel_l2: AggregateStat,
    pub diverged: usize,
}

impl SweepResult {
    pub(crate) fn new(sweep: &str, source: &dyn SpanSource) -> Self {
        Self {
            provenance: SweepProvenance {
                sweep: sweep.into(),
                source: source.id(),
                seeds: source.seeds(),
            },
            ..Self::default()
        }
    }

    pub fn sort(&mut self) {
        self.rows.sort_by(SweepRow::key_cmp);
        self.fits.sort_by(|a, b| {
            a.formulation
                .cmp(&b.formulation)
                .then_with(|| a.solver.cmp(&b.solver))
                .then_with(|| a.rank.cmp(&b.rank))
                .then_with(|| a.alpha.total_cmp(&b.alpha))
                .then_with(|| a.budget.cmp(&b.budget))
                .then_with(|| a.prune_length.cmp(&b.prune_length))
                .then_with(|| a.cut_start.cmp(&b.cut_start))
        });
        self.failures.sort();
    }

    /// Checks that no two rows share a key and steps stay within spans.
    pub fn validate(&self) -> Result<()> {
        for w in self.rows.windows(2) {
            if w[0].key_cmp(&w[1]) == Ordering::Equal {
                return Err(Error::validation(format!(
                    "duplicate row key at cut {} p {} q {}",
                    w[1].cut_start, w[1].prune_length, w[1].step
                )));
            }
        }
        if let Some(r) = self
            .rows
            .iter()
            .find(|r| r.step > r.prune_length || r.step == 0)
        {
            return Err(Error::validation(format!(
                "row step {} outside 1..={}",
                r.step, r.prune_length
            )));
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(CSV_COLUMNS)?;
        for row in &self.rows {
            w.write_record(row.csv_record())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Same rows, optionally with `rel_l2` clipped for plotting.
    pub fn write_plot_csv<W: Write>(&self, sink: W, cap_rel_l2: Option<f64>) -> Result<()> {
        let mut capped = self.clone();
        if let Some(cap) = cap_rel_l2 {
            for r in &mut capped.rows {
                if r.metrics.rel_l2 > cap {
                    r.metrics.rel_l2 = cap;
                }
            }
        }
        capped.write_csv(sink)
    }

    pub fn write_jsonl<W: Write>(&self, mut sink: W) -> Result<()> {
        for row in &self.rows {
            serde_json::to_writer(&mut sink, row)?;
            sink.write_all(b"\n")?;
        }
        sink.flush()?;
        Ok(())
    }

    pub fn write_fits_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record([
            "cut_start",
            "prune_length",
            "formulation",
            "solver",
            "rank",
            "alpha",
            "budget",
            "effective_rank",
            "train_mse",
        ])?;
        for f in &self.fits {
            w.write_record([
                f.cut_start.to_string(),
                f.prune_length.to_string(),
                f.formulation.to_string(),
                f.solver.map_or("none".to_string(), |s| s.to_string()),
                f.rank.to_string(),
                f.alpha.to_string(),
                f.budget.to_string(),
                f.effective_rank.to_string(),
                f.train_mse.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads rows written by [`SweepResult::write_csv`].
    pub fn read_csv<R: std::io::Read>(src: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(src);
        let header = r.headers()?.clone();
        if header.iter().ne(CSV_COLUMNS.iter().copied()) {
            return Err(Error::validation(format!(
                "unexpected sweep CSV header {:?}",
                header.iter().collect::<Vec<_>>()
            )));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(SweepRow::from_csv_record(&rec?)?);
        }
        Ok(Self {
            rows,
            ..Self::default()
        })
    }

    /// Median and IQR over cut starts for every other key combination.
    /// Diverged rows are counted but left out of the statistics.
    pub fn summarize(&self) -> Vec<SummaryRow> {
        type Key = (Location, String, String, usize, usize, usize, Rank);
        let mut groups: BTreeMap<Key, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
        for r in &self.rows {
            let key = (
                r.location,
                r.token_group.clone(),
                r.method(),
                r.prune_length,
                r.step,
                r.budget,
                r.rank,
            );
            let e = groups.entry(key).or_default();
            if r.diverged || !r.metrics.is_finite() {
                e.2 += 1;
            } else {
                e.0.push(r.metrics.cos);
                e.1.push(r.metrics.rel_l2);
            }
        }
        groups
            .into_iter()
            .filter_map(
                |(
                    (location, token_group, method, prune_length, step, budget, rank),
                    (cos, rel, diverged),
                )| {
                    Some(SummaryRow {
                        location,
                        token_group,
                        method,
                        prune_length,
                        step,
                        budget,
                        rank,
                        cos: aggregate(&cos).ok()?,
                        rel_l2: aggregate(&rel).ok()?,
                        diverged,
                    })
                },
            )
            .collect()
    }
}

/// Fixed-width summary table, one line per group.
pub fn render_summary(rows: &[SummaryRow]) -> String {
    let mut out = format!(
        "{:<10} {:<6} {:<14} {:>3} {:>3} {:>6} {:>5}  {:>24}  {:>24}\n",
        "location",
        "group",
        "method",
        "p",
        "q",
        "budget",
        "rank",
        "cos median [q25, q75]",
        "rel_l2 median [q25, q75]"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<10} {:<6} {:<14} {:>3} {:>3} {:>6} {:>5}  {:>8.4} [{:.4}, {:.4}]  {:>8.4} [{:.4}, {:.4}]{}\n",
            r.location.to_string(),
            r.token_group,
            r.method,
            r.prune_length,
            r.step,
            r.budget,
            r.rank.to_string(),
            r.cos.median,
            r.cos.q25,
            r.cos.q75,
            r.rel_l2.median,
            r.rel_l2.q25,
            r.rel_l2.q75,
            if r.diverged > 0 { format!("  ({} diverged)", r.diverged) } else { String::new() }
        ));
    }
    out
}

/// Runs `f` over `tasks` on `jobs` threads (0 = rayon default) and keeps the
/// input order.
pub(crate) fn run_parallel<T: Sync, R: Send>(
    jobs: usize,
    tasks: &[T],
    f: impl Fn(&T) -> R + Sync + Send,
) -> Result<Vec<R>> {
    use rayon::prelude::*;
    if jobs == 1 {
        return Ok(tasks.iter().map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::validation(format!("thread pool: {e}")))?;
    Ok(pool.install(|| tasks.par_iter().map(f).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(cut: usize, q: usize) -> SweepRow {
        SweepRow {
            cut_start: cut,
            prune_length: 3,
            step: q,
            formulation: Formulation::Anchored,
            solver: Some(Solver::Rrr),
            rank: Rank::Fixed(8),
            alpha: 1e-5,
            budget: 64,
            token_group: "all".into(),
            metrics: MetricRecord {
                cos: 0.5,
                rel_l2: 1.25,
                r2: 0.1,
                norm_ratio: 0.9,
                n_tokens: 17,
            },
            location: Location::Local,
            diverged: false,
        }
    }

    #[test]
    fn csv_round_trip_and_order() {
        let mut res = SweepResult {
            rows: vec![row(2, 1), row(1, 3), row(1, 1)],
            ..Default::default()
        };
        res.sort();
        assert_eq!((res.rows[0].cut_start, res.rows[0].step), (1, 1));
        res.validate().unwrap();
        let mut buf = Vec::new();
        res.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "cut_start,prune_length,step,formulation,solver,rank,alpha,budget,token_group,cos"
        ));
        let back = SweepResult::read_csv(&buf[..]).unwrap();
        assert_eq!(back.rows, res.rows);
    }

    #[test]
    fn duplicate_keys_rejected() {
        let mut res = SweepResult {
            rows: vec![row(1, 1), row(1, 1)],
            ..Default::default()
        };
        res.sort();
        assert!(res.validate().is_err());
    }

    #[test]
    fn capping_leaves_raw_rows() {
        let mut r = row(1, 1);
        r.metrics.rel_l2 = 1e7;
        let res = SweepResult {
            rows: vec![r],
            ..Default::default()
        };
        let mut buf = Vec::new();
        res.write_plot_csv(&mut buf, Some(10.0)).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains(",10,"));
        assert_eq!(res.rows[0].metrics.rel_l2, 1e7);
    }
}
