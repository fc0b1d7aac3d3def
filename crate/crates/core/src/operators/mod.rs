//! Replacement operators: full and anchored DMD with PCR or RRR truncation,
//! the ReplaceMe endpoint map, and the identity baseline.

mod config;
mod cut;
mod fit;
mod fuse;
mod io;
mod modes;

pub use config::{FitConfig, Formulation, Rank, Solver};
pub use cut::{cut_distances, select_cut, CutMeasure};
pub use fit::{
    endpoint_mse, fit_operator, fit_pcr, fit_replaceme, fit_rrr, pair_mse, predict, FittedOperator,
    Provenance,
};
pub use fuse::fuse_into_mlp;
pub use io::{load_operator, save_operator, sidecar_path, OperatorHeader};
pub use modes::{cabs, extract_modes, modes_of, ModeSet, EIG_RESIDUAL_TOL};
