use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use spandmd::snapshot::{read_span_file, write_span_file, ReadOptions, SnapshotSpan, SpanDims};
use spandmd::toymodel::{generate_linear_span, CALIBRATION_STREAM, EVALUATION_STREAM};
use spandmd::{LinearSystem, ToyModel};

use crate::config::List;
use crate::output::OutDir;
use crate::sources::{SourceConfig, SourceFlags, SourceKind};

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenerateFlags {
    #[command(flatten)]
    #[serde(flatten)]
    pub source: SourceFlags,
    /// Cut starts, e.g. `4` or `1..3` [default: first valid start]
    #[arg(long)]
    pub cut: Option<List<usize>>,
    /// Prune lengths [default: 3]
    #[arg(long)]
    pub p: Option<List<usize>>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    #[serde(flatten)]
    pub source: SourceConfig,
    pub cut: Option<List<usize>>,
    pub p: List<usize>,
    pub out: Option<PathBuf>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            source: SourceConfig::default(),
            cut: None,
            p: List(vec![3]),
            out: None,
        }
    }
}

fn dims_json(dims: &SpanDims) -> Value {
    json!({
        "d": dims.d,
        "t_kept": dims.t_kept(),
        "images": dims.images,
        "p": dims.p,
        "i": dims.i,
        "depth": dims.depth,
        "n_register": dims.n_register,
        "cls_index": dims.cls_index,
    })
}

fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    m.columns_mut(0, a.ncols()).copy_from(a);
    m.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    m
}

/// Relative residual of `X_{q+1} = K* X_q` over the stored (f32) span.
fn shift_residual(system: &LinearSystem, span: &SnapshotSpan<f64>) -> f64 {
    let states = span.states();
    states
        .windows(2)
        .map(|w| (&w[1] - system.k_star() * &w[0]).norm() / w[1].norm().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

pub fn run(cfg: GenerateConfig, out: PathBuf) -> Result<Value> {
    let src = &cfg.source;
    let mut dir = OutDir::create(&out)?;
    let mut files = Vec::new();
    let images = src.images + src.eval_images;
    match src.source {
        SourceKind::Toy => {
            let model = ToyModel::generate(src.toy_spec())?;
            let inputs = hstack(
                &model.sample_inputs(src.images, CALIBRATION_STREAM),
                &model.sample_inputs(src.eval_images, EVALUATION_STREAM),
            );
            let cuts = cfg.cut.clone().map_or(vec![1], |c| c.0);
            for &i in &cuts {
                for &p in &cfg.p.0 {
                    let span = model.forward_with_taps(&inputs, i, p)?;
                    let name = format!("span_i{i}_p{p}.sdms");
                    let bytes = write_span_file(&span, dir.path(&name))?;
                    dir.record(&name);
                    files.push(json!({"path": name, "bytes": bytes, "dims": dims_json(span.dims())}));
                }
            }
        }
        SourceKind::Linear => {
            let system = src.linear_system()?;
            let depth = src.linear_depth();
            let cuts = cfg.cut.clone().map_or(vec![0], |c| c.0);
            for &i in &cuts {
                for &p in &cfg.p.0 {
                    if i + p > depth {
                        bail!("span i = {i}, p = {p} exceeds depth {depth}");
                    }
                    let dims = SpanDims::from_kept(system.dim(), src.linear_tokens(), images, p, i, depth, 0);
                    let span = generate_linear_span(&system, dims, src.seed)?;
                    let name = format!("span_i{i}_p{p}.sdms");
                    let path = dir.path(&name);
                    let bytes = write_span_file(&span, &path)?;
                    dir.record(&name);
                    let stored = read_span_file(&path, ReadOptions::default())?.cast::<f64>();
                    let residual = shift_residual(&system, &stored);
                    if residual > 1e-5 {
                        bail!("{name}: stored span breaks X_(q+1) = K* X_q (relative residual {residual:.2e})");
                    }
                    files.push(json!({
                        "path": name,
                        "bytes": bytes,
                        "dims": dims_json(span.dims()),
                        "shift_residual": residual,
                    }));
                }
            }
            dir.write_json("k_star.json", system.k_star())?;
        }
        other => bail!("generate supports the toy and linear sources, not {other:?}"),
    }
    dir.finish(
        "generate",
        &cfg,
        json!({"calibration_images": src.images, "spans": files}),
    )
}
