use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use spandmd::metrics::{self, MetricRecord};
use spandmd::operators::{fit_operator, predict, save_operator, FitConfig, Formulation, Rank, Solver};
use spandmd::snapshot::{read_span_file, ReadOptions};
use spandmd::DEFAULT_ALPHA;

use crate::output::sayln;
use crate::sources::calibration_split;

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitFlags {
    /// SDMS span to fit
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub formulation: Option<Formulation>,
    #[arg(long)]
    pub solver: Option<Solver>,
    /// `full` or an integer
    #[arg(long)]
    pub rank: Option<Rank>,
    /// Ridge penalty
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Leading images used for calibration [default: from manifest.json]
    #[arg(long)]
    pub calib_images: Option<usize>,
    /// Operator JSON to write (a .bin sidecar and a .metrics.json go next to it)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitSettings {
    pub input: Option<PathBuf>,
    pub formulation: Formulation,
    pub solver: Solver,
    pub rank: Rank,
    pub alpha: f64,
    pub calib_images: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            input: None,
            formulation: Formulation::Full,
            solver: Solver::Pcr,
            rank: Rank::Full,
            alpha: DEFAULT_ALPHA,
            calib_images: None,
            out: None,
        }
    }
}

#[derive(Serialize)]
struct StepMetrics {
    step: usize,
    #[serde(flatten)]
    metrics: MetricRecord,
}

pub fn run(cfg: FitSettings, input: PathBuf) -> Result<Value> {
    let span = read_span_file(&input, ReadOptions::default())
        .with_context(|| format!("reading {}", input.display()))?
        .cast::<f64>();
    let dims = *span.dims();
    let split = calibration_split(cfg.calib_images, &input)?;
    if split == 0 || split >= dims.images {
        return Err(spandmd::Error::Validation(format!(
            "calibration split {split} must leave held-out images out of {}",
            dims.images
        ))
        .into());
    }
    let cal = span.select_images(0, split)?;
    let eval = span.select_images(split, dims.images - split)?;
    let op = fit_operator(&cal, &FitConfig::new(cfg.formulation, cfg.solver, cfg.rank, cfg.alpha))?;

    let steps: Vec<usize> = if cfg.formulation == Formulation::Replaceme {
        vec![dims.p]
    } else {
        (1..=dims.p).collect()
    };
    let mut rows = Vec::new();
    sayln!(
        "{} i = {} p = {}  effective rank {}  train mse {:.4e}",
        cfg.formulation,
        dims.i,
        dims.p,
        op.effective_rank(),
        op.train_mse()
    );
    sayln!("{:>3} {:>10} {:>12} {:>10} {:>10}", "q", "cos", "rel_l2", "r2", "norm_ratio");
    for q in steps {
        let pred = predict(&op, &eval, q)?;
        let (_, m) = metrics::evaluate(&pred, eval.state(q), dims.t_kept(), None)?.remove(0);
        sayln!(
            "{q:>3} {:>10.6} {:>12.4e} {:>10.6} {:>10.6}",
            m.cos, m.rel_l2, m.r2, m.norm_ratio
        );
        rows.push(StepMetrics { step: q, metrics: m });
    }

    let report = json!({
        "command": "fit",
        "version": env!("CARGO_PKG_VERSION"),
        "config": &cfg,
        "input": input,
        "calibration_images": split,
        "effective_rank": op.effective_rank(),
        "train_mse": op.train_mse(),
        "metrics": rows,
    });
    if let Some(out) = &cfg.out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        save_operator(&op, out)?;
        let metrics_path = out.with_extension("metrics.json");
        fs::write(&metrics_path, serde_json::to_string_pretty(&report)? + "\n")
            .with_context(|| format!("writing {}", metrics_path.display()))?;
    }
    Ok(report)
}
