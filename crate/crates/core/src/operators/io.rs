//! Operators are stored as a JSON header next to a binary sidecar holding
//! `K` (and the fit basis, if any) as row-major little-endian f64.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::config::FitConfig;
use super::fit::{FittedOperator, Provenance};
use crate::snapshot::SpanDims;
use crate::{Error, Result, Scalar};

const FORMAT: &str = "spandmd-operator";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OperatorHeader {
    pub format: String,
    pub version: u32,
    pub d: usize,
    pub config: FitConfig,
    pub span_meta: Option<SpanDims>,
    pub effective_rank: usize,
    pub train_mse: f64,
    pub provenance: Provenance,
    /// Sidecar file name, relative to the header.
    pub payload: String,
    pub layout: String,
    /// Columns of the stored basis following `K` in the payload (0 if none).
    pub basis_cols: usize,
}

/// Sidecar path for a header path: same stem, `.bin` extension.
pub fn sidecar_path(header: &Path) -> PathBuf {
    header.with_extension("bin")
}

fn push_row_major<T: Scalar>(buf: &mut Vec<u8>, m: &DMatrix<T>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            buf.extend_from_slice(&m[(r, c)].as_f64().to_le_bytes());
        }
    }
}

/// Writes `op` to `path` (JSON) and its sidecar; returns the sidecar path.
pub fn save_operator<T: Scalar>(op: &FittedOperator<T>, path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    let bin = sidecar_path(path);
    let d = op.dim();
    let basis_cols = op.basis().map_or(0, |b| b.ncols());
    let header = OperatorHeader {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        d,
        config: *op.config(),
        span_meta: op.span_meta().copied(),
        effective_rank: op.effective_rank(),
        train_mse: op.train_mse(),
        provenance: op.provenance().clone(),
        payload: bin
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        layout: "row-major f64 little-endian".into(),
        basis_cols,
    };
    let mut buf = Vec::with_capacity(8 * d * (d + basis_cols));
    push_row_major(&mut buf, op.k());
    if let Some(b) = op.basis() {
        push_row_major(&mut buf, b);
    }
    fs::write(&bin, &buf)?;
    fs::write(path, serde_json::to_string_pretty(&header)?)?;
    Ok(bin)
}

fn take_row_major(bytes: &[u8], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |r, c| {
        let at = 8 * (r * cols + c);
        f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8-byte slice"))
    })
}

/// Reads an operator written by [`save_operator`].
pub fn load_operator(path: impl AsRef<Path>) -> Result<FittedOperator<f64>> {
    let path = path.as_ref();
    let header: OperatorHeader = serde_json::from_str(&fs::read_to_string(path)?)?;
    if header.format != FORMAT || header.version != FORMAT_VERSION {
        return Err(Error::validation(format!(
            "{} is not a version-{FORMAT_VERSION} operator header",
            path.display()
        )));
    }
    let bin = path
        .parent()
        .unwrap_or(Path::new("."))
        .join(&header.payload);
    let bytes = fs::read(&bin)?;
    let d = header.d;
    let expected = 8 * d * (d + header.basis_cols);
    if bytes.len() < expected {
        return Err(Error::Truncated {
            array: format!("operator payload {}", bin.display()),
        });
    }
    if bytes.len() > expected {
        return Err(Error::TrailingBytes(bytes.len() - expected));
    }
    let k = take_row_major(&bytes, d, d);
    let basis =
        (header.basis_cols > 0).then(|| take_row_major(&bytes[8 * d * d..], d, header.basis_cols));
    FittedOperator::from_parts(
        k,
        header.config,
        header.span_meta,
        header.effective_rank,
        header.train_mse,
        header.provenance,
        basis,
    )
}
