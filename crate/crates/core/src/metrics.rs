//! Token-wise evaluation metrics.
//!
//! Arrays are `d × (t_kept·B)` matrices with one token per column. Every
//! metric is a mean over tokens of a per-token score, accumulated in `f64`.
//! Tokens whose ground truth is degenerate (zero norm, or constant for the
//! centered score) raise [`Error::DegenerateToken`] instead of producing NaN.

use nalgebra::{DMatrix, DVectorView};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub cos: f64,
    pub rel_l2: f64,
    pub r2: f64,
    pub norm_ratio: f64,
    pub n_tokens: usize,
}

impl MetricRecord {
    /// Placeholder stored for rows whose activations diverged.
    pub fn sentinel(n_tokens: usize) -> Self {
        Self {
            cos: f64::NAN,
            rel_l2: f64::NAN,
            r2: f64::NAN,
            norm_ratio: f64::NAN,
            n_tokens,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.cos.is_finite()
            && self.rel_l2.is_finite()
            && self.r2.is_finite()
            && self.norm_ratio.is_finite()
    }
}

fn check_shapes<T: Scalar>(pred: &DMatrix<T>, truth: &DMatrix<T>) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(Error::validation(format!(
            "prediction {:?} and truth {:?} differ in shape",
            pred.shape(),
            truth.shape()
        )));
    }
    if truth.ncols() == 0 {
        return Err(Error::validation("no tokens to evaluate"));
    }
    Ok(())
}

struct Col {
    dot: f64,
    pred_sq: f64,
    truth_sq: f64,
    diff_sq: f64,
}

fn col_terms<T: Scalar>(p: DVectorView<'_, T>, x: DVectorView<'_, T>) -> Col {
    let mut c = Col {
        dot: 0.0,
        pred_sq: 0.0,
        truth_sq: 0.0,
        diff_sq: 0.0,
    };
    for (a, b) in p.iter().zip(x.iter()) {
        let (a, b) = (a.as_f64(), b.as_f64());
        c.dot += a * b;
        c.pred_sq += a * a;
        c.truth_sq += b * b;
        c.diff_sq += (a - b) * (a - b);
    }
    c
}

fn centered_terms<T: Scalar>(p: DVectorView<'_, T>, x: DVectorView<'_, T>) -> Col {
    let n = p.len() as f64;
    let pm = p.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let xm = x.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let mut c = Col {
        dot: 0.0,
        pred_sq: 0.0,
        truth_sq: 0.0,
        diff_sq: 0.0,
    };
    for (a, b) in p.iter().zip(x.iter()) {
        let (a, b) = (a.as_f64() - pm, b.as_f64() - xm);
        c.dot += a * b;
        c.pred_sq += a * a;
        c.truth_sq += b * b;
    }
    c
}

fn mean_over<T: Scalar>(
    pred: &DMatrix<T>,
    truth: &DMatrix<T>,
    cols: &[usize],
    centered: bool,
    score: impl Fn(&Col) -> f64,
) -> Result<f64> {
    check_shapes(pred, truth)?;
    let mut bad = Vec::new();
    let mut sum = 0.0;
    for &j in cols {
        let c = if centered {
            centered_terms(pred.column(j), truth.column(j))
        } else {
            col_terms(pred.column(j), truth.column(j))
        };
        if c.truth_sq == 0.0 {
            bad.push(j);
            continue;
        }
        sum += score(&c);
    }
    if !bad.is_empty() {
        return Err(Error::DegenerateToken { indices: bad });
    }
    Ok(sum / cols.len() as f64)
}

fn cos_score(c: &Col) -> f64 {
    if c.pred_sq == 0.0 {
        0.0
    } else {
        c.dot / (c.pred_sq.sqrt() * c.truth_sq.sqrt())
    }
}

fn rel_l2_score(c: &Col) -> f64 {
    c.diff_sq.sqrt() / c.truth_sq.sqrt()
}

fn r2_score(c: &Col) -> f64 {
    if c.pred_sq == 0.0 {
        0.0
    } else {
        c.dot * c.dot / (c.pred_sq * c.truth_sq)
    }
}

fn norm_ratio_score(c: &Col) -> f64 {
    c.pred_sq.sqrt() / c.truth_sq.sqrt()
}

fn all_columns(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Mean token-wise cosine similarity. A zero prediction scores 0.
pub fn cosine_similarity<T: Scalar>(pred: &DMatrix<T>, truth: &DMatrix<T>) -> Result<f64> {
    mean_over(pred, truth, &all_columns(truth.ncols()), false, cos_score)
}

/// Mean token-wise `‖x̂ − x‖ / ‖x‖`.
pub fn relative_l2<T: Scalar>(pred: &DMatrix<T>, truth: &DMatrix<T>) -> Result<f64> {
    mean_over(
        pred,
        truth,
        &all_columns(truth.ncols()),
        false,
        rel_l2_score,
    )
}

/// Mean token-wise squared cosine between mean-centered vectors.
pub fn r2_brh<T: Scalar>(pred: &DMatrix<T>, truth: &DMatrix<T>) -> Result<f64> {
    mean_over(pred, truth, &all_columns(truth.ncols()), true, r2_score)
}

/// Mean token-wise `‖x̂‖ / ‖x‖`.
pub fn norm_ratio<T: Scalar>(pred: &DMatrix<T>, truth: &DMatrix<T>) -> Result<f64> {
    mean_over(
        pred,
        truth,
        &all_columns(truth.ncols()),
        false,
        norm_ratio_score,
    )
}

fn record_over<T: Scalar>(
    pred: &DMatrix<T>,
    truth: &DMatrix<T>,
    cols: &[usize],
) -> Result<MetricRecord> {
    Ok(MetricRecord {
        cos: mean_over(pred, truth, cols, false, cos_score)?,
        rel_l2: mean_over(pred, truth, cols, false, rel_l2_score)?,
        r2: mean_over(pred, truth, cols, true, r2_score)?,
        norm_ratio: mean_over(pred, truth, cols, false, norm_ratio_score)?,
        n_tokens: cols.len(),
    })
}

/// A named set of token positions (indices into the kept tokens of an image).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGroup {
    pub name: String,
    pub tokens: Vec<usize>,
}

/// Disjoint groups covering every kept token position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenPartition {
    t_kept: usize,
    groups: Vec<TokenGroup>,
}

impl TokenPartition {
    pub fn new(t_kept: usize, mut groups: Vec<TokenGroup>) -> Result<Self> {
        let mut seen = vec![false; t_kept];
        for g in &mut groups {
            g.tokens.sort_unstable();
            if g.tokens.is_empty() {
                return Err(Error::validation(format!(
                    "token group {:?} is empty",
                    g.name
                )));
            }
            for &tok in &g.tokens {
                if tok >= t_kept {
                    return Err(Error::validation(format!(
                        "token {tok} outside 0..{t_kept}"
                    )));
                }
                if std::mem::replace(&mut seen[tok], true) {
                    return Err(Error::validation(format!(
                        "token {tok} appears in more than one group"
                    )));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::validation(format!(
                "token {missing} is not covered by any group"
            )));
        }
        Ok(Self { t_kept, groups })
    }

    /// One group named `all` holding every token.
    pub fn whole(t_kept: usize) -> Self {
        Self {
            t_kept,
            groups: vec![TokenGroup {
                name: "all".into(),
                tokens: (0..t_kept).collect(),
            }],
        }
    }

    /// `{cls}` and `{patch}` (every other kept token).
    pub fn cls_patch(t_kept: usize, cls_index: usize) -> Result<Self> {
        let patch: Vec<usize> = (0..t_kept).filter(|&t| t != cls_index).collect();
        if patch.is_empty() {
            return Err(Error::validation(
                "cls/patch partition needs at least two tokens",
            ));
        }
        Self::new(
            t_kept,
            vec![
                TokenGroup {
                    name: "cls".into(),
                    tokens: vec![cls_index],
                },
                TokenGroup {
                    name: "patch".into(),
                    tokens: patch,
                },
            ],
        )
    }

    pub fn groups(&self) -> &[TokenGroup] {
        &self.groups
    }

    pub fn t_kept(&self) -> usize {
        self.t_kept
    }
}

/// Metrics per token group; without a partition, one `all` record.
pub fn evaluate<T: Scalar>(
    pred: &DMatrix<T>,
    truth: &DMatrix<T>,
    t_kept: usize,
    partition: Option<&TokenPartition>,
) -> Result<Vec<(String, MetricRecord)>> {
    check_shapes(pred, truth)?;
    if t_kept == 0 || !truth.ncols().is_multiple_of(t_kept) {
        return Err(Error::validation(format!(
            "{} columns are not a multiple of t_kept = {t_kept}",
            truth.ncols()
        )));
    }
    let images = truth.ncols() / t_kept;
    let whole;
    let partition = match partition {
        Some(p) => {
            if p.t_kept != t_kept {
                return Err(Error::validation(format!(
                    "partition built for {} tokens, data has {t_kept}",
                    p.t_kept
                )));
            }
            p
        }
        None => {
            whole = TokenPartition::whole(t_kept);
            &whole
        }
    };
    partition
        .groups
        .iter()
        .map(|g| {
            let cols: Vec<usize> = (0..images)
                .flat_map(|b| g.tokens.iter().map(move |&tok| b * t_kept + tok))
                .collect();
            Ok((g.name.clone(), record_over(pred, truth, &cols)?))
        })
        .collect()
}

/// Median and quartiles of per-configuration values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateStat {
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub n: usize,
}

/// Quantile of sorted data, linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn aggregate(values: &[f64]) -> Result<AggregateStat> {
    if values.is_empty() {
        return Err(Error::validation("cannot aggregate an empty sequence"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(AggregateStat {
        median: quantile_sorted(&v, 0.5),
        q25: quantile_sorted(&v, 0.25),
        q75: quantile_sorted(&v, 0.75),
        n: v.len(),
    })
}
