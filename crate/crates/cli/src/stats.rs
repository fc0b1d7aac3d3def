use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use spandmd::experiments::{Location, SweepResult};
use spandmd::operators::Rank;
use spandmd::stats::{friedman_nemenyi, render_table, write_table_csv, Better};

use crate::output::say;
use crate::output::TotalFailure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Cos,
    RelL2,
    R2,
}

impl Metric {
    fn better(self) -> Better {
        match self {
            Metric::RelL2 => Better::Lower,
            Metric::Cos | Metric::R2 => Better::Higher,
        }
    }
}

fn parse_location(s: &str) -> Result<Location, String> {
    match s {
        "local" => Ok(Location::Local),
        "downstream" => Ok(Location::Downstream),
        other => Err(format!("expected local or downstream, got {other:?}")),
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct StatsFlags {
    /// Sweep results CSV
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Score ranked per configuration
    #[arg(long, value_enum)]
    pub metric: Option<Metric>,
    /// Significance level for the critical difference (0.05 or 0.10)
    #[arg(long)]
    pub significance: Option<f64>,
    /// `local` or `downstream`
    #[arg(long, value_parser = parse_location)]
    pub location: Option<Location>,
    #[arg(long)]
    pub token_group: Option<String>,
    /// Keep only DMD rows of this rank
    #[arg(long)]
    pub rank: Option<Rank>,
    /// Use every step, not only q = p
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub all_steps: bool,
    /// Write the rank table as CSV
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StatsSettings {
    pub input: Option<PathBuf>,
    pub metric: Metric,
    pub significance: f64,
    pub location: Location,
    pub token_group: String,
    pub rank: Option<Rank>,
    pub all_steps: bool,
    pub out: Option<PathBuf>,
}

impl Default for StatsSettings {
    fn default() -> Self {
        Self {
            input: None,
            metric: Metric::Cos,
            significance: 0.05,
            location: Location::Local,
            token_group: "all".into(),
            rank: None,
            all_steps: false,
            out: None,
        }
    }
}

pub struct ScoreTable {
    pub methods: Vec<String>,
    pub scores: DMatrix<f64>,
    pub incomplete: usize,
}

/// One row per configuration `(cut, p, q, budget)` in which every method
/// has a score; diverged or non-finite scores rank last.
pub fn score_table(result: &SweepResult, s: &StatsSettings) -> Result<ScoreTable> {
    let better = s.metric.better();
    let worst = match better {
        Better::Higher => f64::NEG_INFINITY,
        Better::Lower => f64::INFINITY,
    };
    let mut blocks: BTreeMap<(usize, usize, usize, usize), BTreeMap<String, f64>> = BTreeMap::new();
    let mut methods = BTreeSet::new();
    for r in &result.rows {
        if r.location != s.location
            || r.token_group != s.token_group
            || (!s.all_steps && r.step != r.prune_length)
            || matches!(s.rank, Some(k) if r.formulation.is_dmd() && r.rank != k)
        {
            continue;
        }
        let m = &r.metrics;
        let v = match s.metric {
            Metric::Cos => m.cos,
            Metric::RelL2 => m.rel_l2,
            Metric::R2 => m.r2,
        };
        let v = if r.diverged || !v.is_finite() { worst } else { v };
        let method = r.method();
        methods.insert(method.clone());
        let key = (r.cut_start, r.prune_length, r.step, r.budget);
        if blocks.entry(key).or_default().insert(method.clone(), v).is_some() {
            return Err(spandmd::Error::Validation(format!(
                "{method} has several rows at cut {}, p {}, q {}; narrow with --rank",
                key.0, key.1, key.2
            ))
            .into());
        }
    }
    let methods: Vec<String> = methods.into_iter().collect();
    let complete: Vec<&BTreeMap<String, f64>> =
        blocks.values().filter(|b| b.len() == methods.len()).collect();
    let incomplete = blocks.len() - complete.len();
    let scores = DMatrix::from_fn(complete.len(), methods.len(), |r, c| complete[r][&methods[c]]);
    Ok(ScoreTable {
        methods,
        scores,
        incomplete,
    })
}

pub fn run(s: &StatsSettings) -> Result<()> {
    let input = s.input.as_ref().expect("checked by the caller");
    let file = File::open(input).with_context(|| format!("opening {}", input.display()))?;
    let result = SweepResult::read_csv(file)?;
    let table = score_table(&result, s)?;
    if table.incomplete > 0 {
        log::warn!(
            "{} configuration(s) lack a score for some method and were left out",
            table.incomplete
        );
    }
    let (n, k) = table.scores.shape();
    if n < 2 || k < 2 {
        return Err(TotalFailure(format!(
            "need at least 2 complete configurations and 2 methods, found {n} and {k}"
        ))
        .into());
    }
    let res = friedman_nemenyi(&table.scores, s.metric.better(), s.significance)?;
    say!("{}", render_table(&res, &table.methods));
    if let Some(out) = &s.out {
        let f = File::create(out).with_context(|| format!("creating {}", out.display()))?;
        write_table_csv(&res, &table.methods, BufWriter::new(f))?;
    }
    Ok(())
}
