use std::io::Write;

use serde::{Deserialize, Serialize};

use super::sweeps::eval_steps;
use super::{BankEntry, SpanSource};
use crate::linalg::pca_project;
use crate::metrics;
use crate::operators::predict;
use crate::snapshot::SnapshotSpan;
use crate::{Error, Mat, Operator, Result};

/// Predicted states of one method, as `(step, full d × N state)` pairs.
#[derive(Debug, Clone)]
pub struct MethodTrajectory {
    pub method: String,
    pub steps: Vec<(usize, Mat)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaRow {
    pub method: String,
    pub step: usize,
    pub coords: Vec<f64>,
    /// Cosine over the whole state at this step.
    pub cos: f64,
    pub rel_l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaTable {
    pub image: usize,
    pub token: usize,
    pub components: usize,
    pub explained: Vec<f64>,
    pub rows: Vec<PcaRow>,
}

pub const TRUTH: &str = "truth";

/// Projects the true trajectory of one `(image, token)` and every method's
/// rollout onto the top-`k` principal directions of the true states.
pub fn pca_trajectory_export(
    span: &SnapshotSpan<f64>,
    predictions: &[MethodTrajectory],
    image: usize,
    token: usize,
    k: usize,
) -> Result<PcaTable> {
    let dims = span.dims();
    let t_kept = dims.t_kept();
    if image >= dims.images || token >= t_kept {
        return Err(Error::validation(format!(
            "(image {image}, token {token}) outside {} images of {t_kept} tokens",
            dims.images
        )));
    }
    let col = image * t_kept + token;
    let p = dims.p;
    let truth = Mat::from_fn(dims.d, p + 1, |r, q| span.state(q)[(r, col)]);
    let max_k = dims.d.min(p + 1);
    if k > max_k {
        log::warn!(
            "PCA: {k} components requested from {} states; using {max_k}",
            p + 1
        );
    }
    let pca = pca_project(&truth, k.min(max_k))?;
    let explained = pca.explained_variance_ratio();
    let mut rows: Vec<PcaRow> = (0..=p)
        .map(|q| PcaRow {
            method: TRUTH.into(),
            step: q,
            coords: pca.scores.column(q).iter().copied().collect(),
            cos: 1.0,
            rel_l2: 0.0,
        })
        .collect();
    for traj in predictions {
        for (q, state) in &traj.steps {
            if *q > p {
                return Err(Error::validation(format!(
                    "{} has step {q} beyond p = {p}",
                    traj.method
                )));
            }
            let truth_q = span.state(*q);
            let m = metrics::evaluate(state, truth_q, t_kept, None)?.remove(0).1;
            let point = Mat::from_column_slice(dims.d, 1, state.column(col).as_slice());
            rows.push(PcaRow {
                method: traj.method.clone(),
                step: *q,
                coords: pca.project(&point).column(0).iter().copied().collect(),
                cos: m.cos,
                rel_l2: m.rel_l2,
            });
        }
    }
    Ok(PcaTable {
        image,
        token,
        components: pca.components(),
        explained,
        rows,
    })
}

fn method_name(op: &Operator) -> String {
    let c = op.config();
    if c.formulation.is_dmd() {
        format!("{}/{}", c.formulation, c.solver)
    } else {
        c.formulation.to_string()
    }
}

/// Rollouts of the banked operators at `(i, p)` on held-out data, with the
/// shared starting point `X_i` at step 0.
pub fn pca_sweep(
    source: &dyn SpanSource,
    bank: &[BankEntry],
    i: usize,
    p: usize,
    image: usize,
    token: usize,
    k: usize,
) -> Result<PcaTable> {
    let span = source.evaluation_span(i, p)?;
    let mut trajectories = Vec::new();
    for entry in bank
        .iter()
        .filter(|e| e.cut_start == i && e.prune_length == p)
    {
        let mut steps = vec![(0, span.state(0).clone())];
        for q in eval_steps(entry.op.formulation(), p) {
            steps.push((q, predict(&entry.op, &span, q)?));
        }
        trajectories.push(MethodTrajectory {
            method: method_name(&entry.op),
            steps,
        });
    }
    if trajectories.is_empty() {
        return Err(Error::validation(format!(
            "no fitted operator at i = {i}, p = {p}"
        )));
    }
    pca_trajectory_export(&span, &trajectories, image, token, k)
}

impl PcaTable {
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        let mut header = vec!["method".to_string(), "step".to_string()];
        header.extend((1..=self.components).map(|j| format!("pc{j}")));
        header.extend(["cos".to_string(), "rel_l2".to_string()]);
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.method.clone(), r.step.to_string()];
            rec.extend(r.coords.iter().map(|c| c.to_string()));
            rec.extend([r.cos.to_string(), r.rel_l2.to_string()]);
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}
