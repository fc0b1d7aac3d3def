use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How a span is turned into a linear replacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    /// `X_{i+q} ≈ K^q X_i` fitted on the raw trajectory.
    Full,
    /// `X_{i+q} ≈ A_i + K^q M_i` fitted on the residual trajectory `X − A_i`.
    Anchored,
    /// Endpoint map `X_{i+p} ≈ A_i + T M_i`.
    Replaceme,
    /// `X_{i+q} ≈ X_i`.
    Identity,
}

impl Formulation {
    pub const ALL: [Formulation; 4] = [
        Formulation::Full,
        Formulation::Anchored,
        Formulation::Replaceme,
        Formulation::Identity,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Formulation::Full => "full",
            Formulation::Anchored => "anchored",
            Formulation::Replaceme => "replaceme",
            Formulation::Identity => "identity",
        }
    }

    /// DMD formulations produce predictions at every intermediate step.
    pub fn is_dmd(&self) -> bool {
        matches!(self, Formulation::Full | Formulation::Anchored)
    }

    pub fn needs_taps(&self) -> bool {
        matches!(self, Formulation::Anchored | Formulation::Replaceme)
    }
}

impl fmt::Display for Formulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Formulation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Formulation::Full),
            "anchored" => Ok(Formulation::Anchored),
            "replaceme" => Ok(Formulation::Replaceme),
            "identity" => Ok(Formulation::Identity),
            other => Err(Error::validation(format!("unknown formulation {other:?}"))),
        }
    }
}

/// Rank-truncation strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    /// Principal component regression: truncate the input covariance.
    Pcr,
    /// Reduced rank regression: truncate the whitened cross-covariance.
    Rrr,
}

impl Solver {
    pub fn as_str(&self) -> &'static str {
        match self {
            Solver::Pcr => "pcr",
            Solver::Rrr => "rrr",
        }
    }
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Solver {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pcr" => Ok(Solver::Pcr),
            "rrr" => Ok(Solver::Rrr),
            other => Err(Error::validation(format!("unknown solver {other:?}"))),
        }
    }
}

/// Operator rank bound; serialized as `"full"` or an integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RankRepr", into = "RankRepr")]
pub enum Rank {
    Full,
    Fixed(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RankRepr {
    Num(usize),
    Word(String),
}

impl TryFrom<RankRepr> for Rank {
    type Error = Error;
    fn try_from(r: RankRepr) -> Result<Self> {
        match r {
            RankRepr::Num(n) => Ok(Rank::Fixed(n)),
            RankRepr::Word(w) => w.parse(),
        }
    }
}

impl From<Rank> for RankRepr {
    fn from(r: Rank) -> Self {
        match r {
            Rank::Full => RankRepr::Word("full".into()),
            Rank::Fixed(n) => RankRepr::Num(n),
        }
    }
}

impl Rank {
    /// Concrete rank for dimension `d`; finite ranks above `d` are clipped.
    pub fn resolve(&self, d: usize) -> usize {
        match *self {
            Rank::Full => d,
            Rank::Fixed(r) => r.min(d),
        }
    }
}

impl fmt::Display for Rank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rank::Full => f.write_str("full"),
            Rank::Fixed(r) => write!(f, "{r}"),
        }
    }
}

impl FromStr for Rank {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(Rank::Full);
        }
        s.parse::<usize>().map(Rank::Fixed).map_err(|_| {
            Error::validation(format!("rank must be \"full\" or an integer, got {s:?}"))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub formulation: Formulation,
    pub solver: Solver,
    pub rank: Rank,
    /// Ridge penalty `α ≥ 0`.
    pub alpha: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            formulation: Formulation::Full,
            solver: Solver::Pcr,
            rank: Rank::Full,
            alpha: crate::DEFAULT_ALPHA,
        }
    }
}

impl FitConfig {
    pub fn new(formulation: Formulation, solver: Solver, rank: Rank, alpha: f64) -> Self {
        Self {
            formulation,
            solver,
            rank,
            alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.formulation == Formulation::Identity {
            return Ok(());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::validation(format!(
                "alpha must be finite and non-negative, got {}",
                self.alpha
            )));
        }
        if self.rank == Rank::Fixed(0) {
            return Err(Error::validation("rank must be at least 1"));
        }
        if self.formulation.is_dmd() && self.solver == Solver::Rrr && self.alpha == 0.0 {
            return Err(Error::validation("RRR needs alpha > 0"));
        }
        Ok(())
    }
}
