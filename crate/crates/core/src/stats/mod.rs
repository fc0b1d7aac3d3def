//! Power-law fits for calibration curves, candidate amplitudes, and the
//! Friedman / Nemenyi ordering test.

mod friedman;
mod power_law;

pub use friedman::{
    chi_square_log10_sf, chi_square_sf, critical_difference, friedman_nemenyi, nemenyi_q, rank_row,
    render_table, write_table_csv, Better, FriedmanResult, CAVEAT,
};
pub use power_law::{
    candidate_constants, fit_power_law, CandidateConstants, PowerLawFit, PowerLawForm,
};
