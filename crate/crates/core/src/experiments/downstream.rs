use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::sweeps::{metric_rows, RowLabel};
use super::{run_parallel, BankEntry, Location, SpanSource, SweepResult, SweepRow, ToySource};
use crate::metrics::{self, aggregate, MetricRecord};
use crate::operators::predict;
use crate::{Error, Mat, Result};

/// Downstream rows whose rel_l2 exceeds this are flagged as diverged.
pub const DIVERGED_REL_L2: f64 = 1e6;

/// Median cosine per method at one prune length, at both locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOrdering {
    pub prune_length: usize,
    /// `(method, median cosine)`, best first.
    pub local: Vec<(String, f64)>,
    pub downstream: Vec<(String, f64)>,
    /// Spearman correlation between local and downstream medians.
    pub spearman: f64,
}

pub struct DownstreamReport {
    pub result: SweepResult,
    pub orderings: Vec<MethodOrdering>,
}

/// Runs the tail blocks of the held-out trace on `substituted` in place of
/// `X_{i+p}` and scores `X_L` against the uninterrupted run.
pub fn downstream_metrics(
    source: &ToySource,
    i: usize,
    p: usize,
    substituted: &Mat,
) -> Result<MetricRecord> {
    let model = source.model();
    let trace = source.evaluation_trace();
    let x_l = model.run_remaining_blocks(trace, substituted, i, p)?;
    let truth = trace.kept_state(model.depth());
    let recs = metrics::evaluate(&x_l, &truth, model.spec().t_kept(), None)?;
    Ok(recs
        .into_iter()
        .next()
        .map(|(_, m)| m)
        .expect("whole partition has one group"))
}

/// Average ranks with ties sharing the mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut s = 0;
    while s < idx.len() {
        let mut e = s;
        while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[s]] {
            e += 1;
        }
        let r = (s + e) as f64 / 2.0 + 1.0;
        for &j in &idx[s..=e] {
            out[j] = r;
        }
        s = e + 1;
    }
    out
}

/// Spearman rank correlation; NaN when either side is constant or too short.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::validation(format!(
            "spearman inputs have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Ok(f64::NAN);
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - mean) * (y - mean);
        saa += (x - mean) * (x - mean);
        sbb += (y - mean) * (y - mean);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(f64::NAN);
    }
    Ok(sab / (saa * sbb).sqrt())
}

fn orderings(rows: &[SweepRow]) -> Result<Vec<MethodOrdering>> {
    let mut cos: BTreeMap<(usize, String, Location), Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| !r.diverged) {
        cos.entry((r.prune_length, r.method(), r.location))
            .or_default()
            .push(r.metrics.cos);
    }
    let mut by_p: BTreeMap<usize, BTreeMap<String, (f64, f64)>> = BTreeMap::new();
    for ((p, method, loc), vals) in cos {
        let med = aggregate(&vals)?.median;
        let slot = by_p
            .entry(p)
            .or_default()
            .entry(method)
            .or_insert((f64::NAN, f64::NAN));
        match loc {
            Location::Local => slot.0 = med,
            Location::Downstream => slot.1 = med,
        }
    }
    let mut out = Vec::new();
    for (p, methods) in by_p {
        let paired: Vec<(&String, f64, f64)> = methods
            .iter()
            .filter(|(_, (l, d))| l.is_finite() && d.is_finite())
            .map(|(m, &(l, d))| (m, l, d))
            .collect();
        let l: Vec<f64> = paired.iter().map(|x| x.1).collect();
        let d: Vec<f64> = paired.iter().map(|x| x.2).collect();
        let sorted = |pick: fn(&(f64, f64)) -> f64| {
            let mut v: Vec<(String, f64)> =
                methods.iter().map(|(m, x)| (m.clone(), pick(x))).collect();
            v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            v
        };
        out.push(MethodOrdering {
            prune_length: p,
            local: sorted(|x| x.0),
            downstream: sorted(|x| x.1),
            spearman: spearman(&l, &d)?,
        });
    }
    Ok(out)
}

/// Substitutes each banked operator's `X_{i+p}` prediction into the held-out
/// forward pass and emits paired local and downstream rows at step `p`.
pub fn downstream_eval(
    source: &ToySource,
    bank: &[BankEntry],
    jobs: usize,
) -> Result<DownstreamReport> {
    let t_kept = source.model().spec().t_kept();
    let outcomes = run_parallel(jobs, bank, |entry| -> Result<Vec<SweepRow>> {
        let (i, p) = (entry.cut_start, entry.prune_length);
        let eval = source.evaluation_span(i, p)?;
        let pred = predict(&entry.op, &eval, p)?;
        let label = RowLabel::of(&entry.op, i, p, entry.budget);
        let mut rows = metric_rows(
            &label,
            p,
            &pred,
            eval.state(p),
            t_kept,
            None,
            Location::Local,
        )?;
        let downstream = if pred.iter().all(|v| v.is_finite()) {
            match downstream_metrics(source, i, p, &pred) {
                Ok(m) if m.is_finite() => Some(m),
                Ok(_) | Err(Error::Generation { .. }) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        let images = eval.dims().images;
        rows.push(match downstream {
            Some(m) => {
                let diverged = m.rel_l2 > DIVERGED_REL_L2;
                label.row(p, "all".into(), m, Location::Downstream, diverged)
            }
            None => label.row(
                p,
                "all".into(),
                MetricRecord::sentinel(t_kept * images),
                Location::Downstream,
                true,
            ),
        });
        Ok(rows)
    })?;
    let mut result = SweepResult::new("downstream", source);
    for (entry, out) in bank.iter().zip(outcomes) {
        match out {
            Ok(rows) => result.rows.extend(rows),
            Err(e) => {
                let msg = format!(
                    "{} at i = {}, p = {}: {e}",
                    entry.op.formulation(),
                    entry.cut_start,
                    entry.prune_length
                );
                log::warn!("{msg}");
                result.failures.push(msg);
            }
        }
    }
    result.sort();
    result.validate()?;
    let orderings = orderings(&result.rows)?;
    Ok(DownstreamReport { result, orderings })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).unwrap().is_nan());
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }
}
