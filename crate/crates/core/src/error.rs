use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("bad magic {found:?}, expected \"SDMS\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported SDMS version {0}")]
    UnsupportedVersion(u32),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("truncated payload: array {array} is incomplete")]
    Truncated { array: String },

    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),

    #[error("non-finite value in array {array} at flat index {index}")]
    NonFinite { array: String, index: usize },

    #[error("formulation error: {0}")]
    Formulation(String),

    #[error("prediction step {step} unsupported for {formulation} (only q = {p})")]
    UnsupportedStep {
        formulation: String,
        step: usize,
        p: usize,
    },

    #[error("degenerate tokens at column indices {indices:?}")]
    DegenerateToken { indices: Vec<usize> },

    #[error("generation error in block {block}: {reason}")]
    Generation { block: usize, reason: String },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
