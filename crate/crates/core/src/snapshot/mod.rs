//! Hidden-state spans and the data matrices pooled from them.
//!
//! A hidden-state array of shape `d × t_kept × B` is held as a column-major
//! `d × (t_kept·B)` matrix whose column `b·t_kept + τ` is token `τ` of image
//! `b`. That is exactly the on-disk layout of the SDMS format, so reading and
//! writing are straight copies.

mod format;

pub use format::{
    read_span, read_span_file, write_span, write_span_file, ReadOptions, HEADER_LEN, MAGIC, VERSION,
};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

/// Shape and position metadata of a span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpanDims {
    /// Feature dimension.
    pub d: usize,
    /// Tokens per image before register tokens are discarded.
    pub t: usize,
    /// Number of images.
    pub images: usize,
    /// Prune length (number of blocks spanned).
    pub p: usize,
    /// Cut start (0-based block index of `X_i`).
    pub i: usize,
    /// Total number of blocks in the source network.
    pub depth: usize,
    pub n_register: usize,
    /// Index of the CLS token among the kept tokens.
    pub cls_index: usize,
}

impl SpanDims {
    /// Dimensions for a span whose arrays already have `t_kept` tokens.
    pub fn from_kept(
        d: usize,
        t_kept: usize,
        images: usize,
        p: usize,
        i: usize,
        depth: usize,
        n_register: usize,
    ) -> Self {
        Self {
            d,
            t: t_kept + n_register,
            images,
            p,
            i,
            depth,
            n_register,
            cls_index: 0,
        }
    }

    pub fn t_kept(&self) -> usize {
        self.t.saturating_sub(self.n_register)
    }

    /// Columns per hidden-state matrix, `t_kept · B`.
    pub fn columns(&self) -> usize {
        self.t_kept() * self.images
    }

    /// Sample count of the pooled pair matrices, `B · p · t_kept`.
    pub fn pooled_samples(&self) -> usize {
        self.columns() * self.p
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.d == 0 {
            return fail("d must be at least 1".into());
        }
        if self.t == 0 || self.images == 0 {
            return fail(format!(
                "t = {} and B = {} must be positive",
                self.t, self.images
            ));
        }
        if self.p == 0 {
            return fail("prune length p must be at least 1".into());
        }
        if self.i + self.p > self.depth {
            return fail(format!(
                "cut start {} + p {} exceeds depth {}",
                self.i, self.p, self.depth
            ));
        }
        if self.n_register >= self.t {
            return fail(format!(
                "n_register {} must be below t {}",
                self.n_register, self.t
            ));
        }
        if self.cls_index >= self.t_kept() {
            return fail(format!(
                "cls_index {} outside kept tokens {}",
                self.cls_index,
                self.t_kept()
            ));
        }
        Ok(())
    }
}

/// Cached hidden states `X_i..X_{i+p}` of one span plus the optional taps of
/// block `i`: the post-attention residual `A_i` and the (LayerScale-folded)
/// MLP output `M_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSpan<T: Scalar> {
    dims: SpanDims,
    states: Vec<DMatrix<T>>,
    anchor: Option<DMatrix<T>>,
    mlp_tap: Option<DMatrix<T>>,
}

impl<T: Scalar> SnapshotSpan<T> {
    /// Builds a span and checks every shape invariant plus the tap identity
    /// `X_i − A_i = M_i` when both taps are present.
    pub fn new(
        dims: SpanDims,
        states: Vec<DMatrix<T>>,
        anchor: Option<DMatrix<T>>,
        mlp_tap: Option<DMatrix<T>>,
    ) -> Result<Self> {
        let span = Self {
            dims,
            states,
            anchor,
            mlp_tap,
        };
        span.validate()?;
        Ok(span)
    }

    fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.states.len() != self.dims.p + 1 {
            return Err(Error::validation(format!(
                "expected {} states for p = {}, got {}",
                self.dims.p + 1,
                self.dims.p,
                self.states.len()
            )));
        }
        let shape = (self.dims.d, self.dims.columns());
        let named = self
            .states
            .iter()
            .enumerate()
            .map(|(q, x)| (format!("X_{}", self.dims.i + q), x))
            .chain(self.anchor.iter().map(|a| ("A".to_string(), a)))
            .chain(self.mlp_tap.iter().map(|m| ("M".to_string(), m)));
        for (name, m) in named {
            if m.shape() != shape {
                return Err(Error::validation(format!(
                    "array {name} has shape {:?}, expected {:?}",
                    m.shape(),
                    shape
                )));
            }
        }
        if let (Some(a), Some(m)) = (&self.anchor, &self.mlp_tap) {
            let (dev, scale) = tap_identity_gap(&self.states[0], a, m);
            // f32 payloads round X and A separately; allow that rounding on top
            // of the relative tolerance.
            let x_max = self.states[0]
                .iter()
                .chain(a.iter())
                .fold(0.0f64, |acc, v| {
                    let v = v.as_f64().abs();
                    if v.is_finite() {
                        acc.max(v)
                    } else {
                        acc
                    }
                });
            let eps = T::default_epsilon().as_f64();
            let tol = 1e-5 * scale + 4.0 * eps * x_max;
            if dev > tol {
                return Err(Error::validation(format!(
                    "tap identity violated: |(X_i - A_i) - M_i|_inf = {dev:e} exceeds {tol:e}"
                )));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> &SpanDims {
        &self.dims
    }

    /// `X_{i+q}` for `q` in `0..=p`.
    pub fn state(&self, q: usize) -> &DMatrix<T> {
        &self.states[q]
    }

    pub fn states(&self) -> &[DMatrix<T>] {
        &self.states
    }

    pub fn anchor(&self) -> Option<&DMatrix<T>> {
        self.anchor.as_ref()
    }

    pub fn mlp_tap(&self) -> Option<&DMatrix<T>> {
        self.mlp_tap.as_ref()
    }

    pub fn has_taps(&self) -> bool {
        self.anchor.is_some() && self.mlp_tap.is_some()
    }

    pub fn cast<U: Scalar>(&self) -> SnapshotSpan<U> {
        let conv = |m: &DMatrix<T>| m.map(|v| U::lit(v.as_f64()));
        SnapshotSpan {
            dims: self.dims,
            states: self.states.iter().map(conv).collect(),
            anchor: self.anchor.as_ref().map(conv),
            mlp_tap: self.mlp_tap.as_ref().map(conv),
        }
    }

    /// Sub-span over images `start..start + count`.
    pub fn select_images(&self, start: usize, count: usize) -> Result<Self> {
        if count == 0 || start + count > self.dims.images {
            return Err(Error::validation(format!(
                "image range {start}..{} outside 0..{}",
                start + count,
                self.dims.images
            )));
        }
        let tk = self.dims.t_kept();
        let slice = |m: &DMatrix<T>| m.columns(start * tk, count * tk).into_owned();
        Ok(Self {
            dims: SpanDims {
                images: count,
                ..self.dims
            },
            states: self.states.iter().map(slice).collect(),
            anchor: self.anchor.as_ref().map(slice),
            mlp_tap: self.mlp_tap.as_ref().map(slice),
        })
    }

    /// Prefix span `X_i..X_{i+p}` for a shorter prune length.
    pub fn truncate_steps(&self, p: usize) -> Result<Self> {
        if p == 0 || p > self.dims.p {
            return Err(Error::validation(format!(
                "cannot truncate span of length {} to {p}",
                self.dims.p
            )));
        }
        Ok(Self {
            dims: SpanDims { p, ..self.dims },
            states: self.states[..=p].to_vec(),
            anchor: self.anchor.clone(),
            mlp_tap: self.mlp_tap.clone(),
        })
    }

    /// First non-finite entry of any array, in file order.
    pub fn first_non_finite(&self) -> Option<(String, usize)> {
        let named = self
            .states
            .iter()
            .enumerate()
            .map(|(q, x)| (format!("layer {}", self.dims.i + q), x))
            .chain(self.anchor.iter().map(|a| ("anchor".to_string(), a)))
            .chain(self.mlp_tap.iter().map(|m| ("mlp_tap".to_string(), m)));
        for (name, m) in named {
            if let Some(idx) = m.iter().position(|v| !v.is_finite()) {
                return Some((name, idx));
            }
        }
        None
    }
}

/// `(‖(X − A) − M‖_∞, ‖M‖_∞)` over columns with finite entries.
pub fn tap_identity_gap<T: Scalar>(x: &DMatrix<T>, a: &DMatrix<T>, m: &DMatrix<T>) -> (f64, f64) {
    let mut dev = 0.0f64;
    let mut scale = 0.0f64;
    for ((xv, av), mv) in x.iter().zip(a.iter()).zip(m.iter()) {
        let (xv, av, mv) = (xv.as_f64(), av.as_f64(), mv.as_f64());
        if !(xv.is_finite() && av.is_finite() && mv.is_finite()) {
            continue;
        }
        dev = dev.max((xv - av - mv).abs());
        scale = scale.max(mv.abs());
    }
    (dev, scale)
}

/// Time-shifted data matrices: column `j` of `zp` is the one-step successor
/// of column `j` of `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrixPair<T: Scalar> {
    pub z: DMatrix<T>,
    pub zp: DMatrix<T>,
    /// Columns discarded because either side held a non-finite value.
    pub dropped: usize,
}

impl<T: Scalar> DataMatrixPair<T> {
    pub fn new(z: DMatrix<T>, zp: DMatrix<T>) -> Result<Self> {
        if z.shape() != zp.shape() {
            return Err(Error::validation(format!(
                "Z {:?} and Z' {:?} differ in shape",
                z.shape(),
                zp.shape()
            )));
        }
        if z.nrows() == 0 || z.ncols() == 0 {
            return Err(Error::validation("empty data matrices"));
        }
        Ok(Self { z, zp, dropped: 0 })
    }

    pub fn dim(&self) -> usize {
        self.z.nrows()
    }

    /// Number of pooled samples `M`.
    pub fn samples(&self) -> usize {
        self.z.ncols()
    }

    /// Removes columns holding NaN or infinity on either side.
    pub fn drop_non_finite(mut self) -> Self {
        let keep: Vec<usize> = (0..self.z.ncols())
            .filter(|&j| {
                self.z
                    .column(j)
                    .iter()
                    .chain(self.zp.column(j).iter())
                    .all(|v| v.is_finite())
            })
            .collect();
        if keep.len() == self.z.ncols() {
            return self;
        }
        let dropped = self.z.ncols() - keep.len();
        let select =
            |m: &DMatrix<T>| DMatrix::from_fn(m.nrows(), keep.len(), |r, c| m[(r, keep[c])]);
        self.z = select(&self.z);
        self.zp = select(&self.zp);
        self.dropped += dropped;
        self
    }
}

fn pool<T: Scalar>(traj: &[DMatrix<T>]) -> Result<DataMatrixPair<T>> {
    let p = traj.len() - 1;
    let (d, n) = traj[0].shape();
    let mut z = DMatrix::zeros(d, n * p);
    let mut zp = DMatrix::zeros(d, n * p);
    for q in 0..p {
        z.columns_mut(q * n, n).copy_from(&traj[q]);
        zp.columns_mut(q * n, n).copy_from(&traj[q + 1]);
    }
    let pair = DataMatrixPair::new(z, zp)?.drop_non_finite();
    if pair.dropped > 0 {
        log::warn!("dropped {} non-finite snapshot columns", pair.dropped);
    }
    if pair.samples() == 0 {
        return Err(Error::validation("no finite snapshot columns remain"));
    }
    Ok(pair)
}

/// Pools every consecutive pair `(X_{i+q}, X_{i+q+1})`, `q = 0..p−1`.
///
/// Columns are ordered step-outer, image-middle, token-inner.
pub fn stack_pairs<T: Scalar>(span: &SnapshotSpan<T>) -> Result<DataMatrixPair<T>> {
    pool(&span.states)
}

/// Same pooling applied to the residual trajectory `X_{i+q} − A_i`.
pub fn stack_residual_pairs<T: Scalar>(span: &SnapshotSpan<T>) -> Result<DataMatrixPair<T>> {
    let anchor = span.anchor.as_ref().ok_or_else(|| {
        Error::Formulation("anchored pooling needs the post-attention residual A_i".into())
    })?;
    let residuals: Vec<DMatrix<T>> = span.states.iter().map(|x| x - anchor).collect();
    pool(&residuals)
}
