use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::metrics;
use crate::{Error, Result, Scalar};

/// Distance `h(X_ℓ, X_{ℓ+p})` used to rank cut candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutMeasure {
    #[default]
    RelL2,
    /// `1 − mean cosine`.
    Cosine,
}

impl fmt::Display for CutMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CutMeasure::RelL2 => "rel_l2",
            CutMeasure::Cosine => "cosine",
        })
    }
}

impl FromStr for CutMeasure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rel_l2" | "rel-l2" => Ok(CutMeasure::RelL2),
            "cosine" | "cos" => Ok(CutMeasure::Cosine),
            other => Err(Error::validation(format!("unknown cut measure {other:?}"))),
        }
    }
}

/// `h(X_ℓ, X_{ℓ+p})` for every `ℓ = 0..=L−p`, given `X_0..X_L`.
pub fn cut_distances<T: Scalar>(
    trajectory: &[DMatrix<T>],
    p: usize,
    measure: CutMeasure,
) -> Result<Vec<f64>> {
    if p == 0 || trajectory.len() <= p {
        return Err(Error::validation(format!(
            "prune length {p} needs at least {} states, got {}",
            p + 1,
            trajectory.len()
        )));
    }
    (0..trajectory.len() - p)
        .map(|l| {
            let (a, b) = (&trajectory[l], &trajectory[l + p]);
            match measure {
                CutMeasure::RelL2 => metrics::relative_l2(a, b),
                CutMeasure::Cosine => metrics::cosine_similarity(a, b).map(|c| 1.0 - c),
            }
        })
        .collect()
}

/// Index of the smallest distance; ties go to the smaller index and NaN
/// never wins.
pub fn select_cut(distances: &[f64]) -> Result<usize> {
    if distances.is_empty() {
        return Err(Error::validation("no cut candidates"));
    }
    let mut best: Option<usize> = None;
    for (l, &h) in distances.iter().enumerate() {
        if h.is_nan() {
            continue;
        }
        if best.is_none_or(|b| h < distances[b]) {
            best = Some(l);
        }
    }
    best.ok_or_else(|| Error::validation("every cut distance is NaN"))
}
