use nalgebra::{DMatrix, DVector};

use crate::{Error, Result, Scalar};

/// Folds an endpoint map `T` into an MLP output projection:
/// `(T·W_out, T·b_out)`.
pub fn fuse_into_mlp<T: Scalar>(
    t: &DMatrix<T>,
    w_out: &DMatrix<T>,
    b_out: &DVector<T>,
) -> Result<(DMatrix<T>, DVector<T>)> {
    if !t.is_square() {
        return Err(Error::validation(format!(
            "T must be square, got {:?}",
            t.shape()
        )));
    }
    if w_out.nrows() != t.ncols() || b_out.len() != t.ncols() {
        return Err(Error::validation(format!(
            "T is {:?} but W_out is {:?} and b_out has {} entries",
            t.shape(),
            w_out.shape(),
            b_out.len()
        )));
    }
    Ok((t * w_out, t * b_out))
}
