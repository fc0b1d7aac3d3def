//! Linear surrogates for spans of residual blocks.
//!
//! Hidden states `X_i, ..., X_{i+p}` cached from a span of `p` blocks are
//! pooled into time-shifted data matrices and a single `d × d` operator `K`
//! is fitted so that `X_{i+q} ≈ K^q X_i`. The crate covers the data model and
//! the SDMS file format ([`snapshot`]), the dense kernels ([`linalg`]), the
//! replacement methods ([`operators`]), evaluation ([`metrics`]), seeded
//! generators ([`toymodel`]), the sweep protocols ([`experiments`]) and the
//! statistics used to summarise them ([`stats`]).
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`). Files hold
//! `f32` payloads; fitting and evaluation normally run in `f64`, and the
//! aliases below name the `f64` instantiations.

pub mod error;
pub mod experiments;
pub mod linalg;
pub mod metrics;
pub mod operators;
pub mod scalar;
pub mod snapshot;
pub mod stats;
pub mod toymodel;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Dense column-major matrix in double precision.
pub type Mat = nalgebra::DMatrix<f64>;
/// Dense column vector in double precision.
pub type Vector = nalgebra::DVector<f64>;

pub type Span = snapshot::SnapshotSpan<f64>;
pub type Pair = snapshot::DataMatrixPair<f64>;
pub type Operator = operators::FittedOperator<f64>;
pub type Modes = operators::ModeSet<f64>;
pub type Svd = linalg::SvdFactors<f64>;
pub type ToyModel = toymodel::ToyModel<f64>;
pub type ToyBlock = toymodel::ToyBlockParams<f64>;
pub type LinearSystem = toymodel::LinearSystem<f64>;
pub type PowerLaw = stats::PowerLawFit<f64>;

/// Ridge penalty used when none is given.
pub const DEFAULT_ALPHA: f64 = 1e-5;
