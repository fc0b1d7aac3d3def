use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::config::{FitConfig, Formulation, Rank, Solver};
use crate::linalg::{self, route_for, CovariancePair, Route};
use crate::snapshot::{stack_pairs, stack_residual_pairs, DataMatrixPair, SnapshotSpan, SpanDims};
use crate::{Error, Result, Scalar};

/// How an operator was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Factorization route; `None` for the identity.
    pub route: Option<Route>,
    /// Columns of the fitted pair after non-finite columns were dropped.
    pub samples: usize,
    pub dropped: usize,
    /// Requested rank exceeded `d` and was clipped.
    pub rank_clipped: bool,
    /// Full-rank RRR, which coincides with the ridge solution.
    pub ridge_equivalent: bool,
    /// Scalar type the fit ran in.
    pub scalar: String,
}

/// An immutable `d × d` replacement operator and its fit metadata.
///
/// For ReplaceMe the matrix is the endpoint map `T` acting on `M_i`.
#[derive(Debug, Clone)]
pub struct FittedOperator<T: Scalar> {
    k: DMatrix<T>,
    config: FitConfig,
    span_meta: Option<SpanDims>,
    effective_rank: usize,
    train_mse: f64,
    provenance: Provenance,
    basis: Option<DMatrix<T>>,
}

impl<T: Scalar> FittedOperator<T> {
    /// Assembles an operator from stored parts, checking shapes.
    pub fn from_parts(
        k: DMatrix<T>,
        config: FitConfig,
        span_meta: Option<SpanDims>,
        effective_rank: usize,
        train_mse: f64,
        provenance: Provenance,
        basis: Option<DMatrix<T>>,
    ) -> Result<Self> {
        if !k.is_square() {
            return Err(Error::validation(format!(
                "operator must be square, got {:?}",
                k.shape()
            )));
        }
        if let Some(meta) = &span_meta {
            if meta.d != k.nrows() {
                return Err(Error::validation(format!(
                    "operator is {0}×{0} but span has d = {1}",
                    k.nrows(),
                    meta.d
                )));
            }
        }
        if let Some(b) = &basis {
            if b.nrows() != k.nrows() || b.ncols() > k.nrows() {
                return Err(Error::validation(format!(
                    "basis shape {:?} incompatible with d = {}",
                    b.shape(),
                    k.nrows()
                )));
            }
        }
        if !(train_mse >= 0.0) && !train_mse.is_nan() {
            return Err(Error::validation(format!(
                "train_mse must be non-negative, got {train_mse}"
            )));
        }
        Ok(Self {
            k,
            config,
            span_meta,
            effective_rank,
            train_mse,
            provenance,
            basis,
        })
    }

    /// `K = I` for dimension `d`.
    pub fn identity(d: usize, span_meta: Option<SpanDims>) -> Self {
        Self {
            k: DMatrix::identity(d, d),
            config: FitConfig {
                formulation: Formulation::Identity,
                ..FitConfig::default()
            },
            span_meta,
            effective_rank: d,
            train_mse: 0.0,
            provenance: Provenance {
                route: None,
                samples: 0,
                dropped: 0,
                rank_clipped: false,
                ridge_equivalent: false,
                scalar: T::NAME.into(),
            },
            basis: None,
        }
    }

    pub fn k(&self) -> &DMatrix<T> {
        &self.k
    }

    pub fn dim(&self) -> usize {
        self.k.nrows()
    }

    pub fn config(&self) -> &FitConfig {
        &self.config
    }

    pub fn formulation(&self) -> Formulation {
        self.config.formulation
    }

    pub fn span_meta(&self) -> Option<&SpanDims> {
        self.span_meta.as_ref()
    }

    pub fn effective_rank(&self) -> usize {
        self.effective_rank
    }

    pub fn train_mse(&self) -> f64 {
        self.train_mse
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Orthonormal basis of the operator's range kept from the fit, if any.
    pub fn basis(&self) -> Option<&DMatrix<T>> {
        self.basis.as_ref()
    }

    fn with_context(mut self, formulation: Formulation, dims: SpanDims, config: FitConfig) -> Self {
        self.config = FitConfig {
            formulation,
            ..config
        };
        self.span_meta = Some(dims);
        self
    }

    /// Converts the stored matrices to another scalar type.
    pub fn cast<U: Scalar>(&self) -> FittedOperator<U> {
        let conv = |m: &DMatrix<T>| m.map(|v| U::lit(v.as_f64()));
        FittedOperator {
            k: conv(&self.k),
            config: self.config,
            span_meta: self.span_meta,
            effective_rank: self.effective_rank,
            train_mse: self.train_mse,
            provenance: self.provenance.clone(),
            basis: self.basis.as_ref().map(conv),
        }
    }
}

/// `‖Z′ − K Z‖²_F / M`, accumulated in f64.
pub fn pair_mse<T: Scalar>(k: &DMatrix<T>, pair: &DataMatrixPair<T>) -> f64 {
    let resid = &pair.zp - k * &pair.z;
    resid.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / pair.samples() as f64
}

fn clip_rank(rank: usize, d: usize) -> Result<(usize, bool)> {
    if rank == 0 {
        return Err(Error::validation("rank must be at least 1"));
    }
    if rank > d {
        log::warn!("requested rank {rank} exceeds d = {d}; clipping");
        return Ok((d, true));
    }
    Ok((rank, false))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::validation(format!(
            "alpha must be finite and non-negative, got {alpha}"
        )));
    }
    Ok(())
}

fn provenance<T: Scalar>(
    pair: &DataMatrixPair<T>,
    route: Route,
    rank_clipped: bool,
    ridge_equivalent: bool,
) -> Provenance {
    Provenance {
        route: Some(route),
        samples: pair.samples(),
        dropped: pair.dropped,
        rank_clipped,
        ridge_equivalent,
        scalar: T::NAME.into(),
    }
}

fn scale_columns<T: Scalar>(m: &mut DMatrix<T>, w: &DVector<T>) {
    for (j, mut col) in m.column_iter_mut().enumerate() {
        col *= w[j];
    }
}

/// Principal component regression: `K = U_r K̃ U_rᵀ` with
/// `K̃ = U_rᵀ Z′ V_r Σ_r/(Σ_r² + α)`.
pub fn fit_pcr<T: Scalar>(
    pair: &DataMatrixPair<T>,
    rank: usize,
    alpha: f64,
) -> Result<FittedOperator<T>> {
    check_alpha(alpha)?;
    let d = pair.dim();
    let (r, clipped) = clip_rank(rank, d)?;
    let a = T::lit(alpha);
    let route = route_for(d, pair.samples());

    let (u_r, reduced) = match route {
        Route::Direct => {
            let tol = if alpha > 0.0 { 0.0 } else { T::PINV_REL_TOL };
            let f = linalg::truncated_svd_with_tol(&pair.z, r, Some(tol))?;
            let gains = f.s.map(|s| s / (s * s + a));
            let mut zv = &pair.zp * &f.v;
            scale_columns(&mut zv, &gains);
            let reduced = f.u.transpose() * zv;
            (f.u, reduced)
        }
        Route::Covariance => {
            let cov = CovariancePair::from_pair(pair, a)?;
            let (lam, vecs) = linalg::symmetric_eigen_desc(&cov.c);
            let cutoff = lam[0].max(T::zero()) * T::lit(T::COV_REL_TOL);
            let keep = if alpha > 0.0 {
                r
            } else {
                (0..d)
                    .take_while(|&j| lam[j] > cutoff && lam[j] > T::zero())
                    .count()
                    .min(r)
            };
            if keep == 0 {
                return Err(Error::validation("Z has no numerically non-zero direction"));
            }
            let u = vecs.columns(0, keep).into_owned();
            let gains = DVector::from_fn(keep, |j, _| T::one() / (lam[j].max(T::zero()) + a));
            let mut reduced = u.transpose() * &cov.t * &u;
            scale_columns(&mut reduced, &gains);
            (u, reduced)
        }
    };
    let effective_rank = u_r.ncols();
    let k = &u_r * &reduced * u_r.transpose();
    let train_mse = pair_mse(&k, pair);
    let config = FitConfig {
        formulation: Formulation::Full,
        solver: Solver::Pcr,
        rank: Rank::Fixed(r),
        alpha,
    };
    Ok(FittedOperator {
        k,
        config: if r == d {
            FitConfig {
                rank: Rank::Full,
                ..config
            }
        } else {
            config
        },
        span_meta: None,
        effective_rank,
        train_mse,
        provenance: provenance(pair, route, clipped, false),
        basis: Some(u_r),
    })
}

/// Reduced rank regression: `K = [[T̂ Ĉ_α^{-1/2}]]_r Ĉ_α^{-1/2}`.
pub fn fit_rrr<T: Scalar>(
    pair: &DataMatrixPair<T>,
    rank: usize,
    alpha: f64,
) -> Result<FittedOperator<T>> {
    check_alpha(alpha)?;
    if alpha == 0.0 {
        return Err(Error::validation(
            "RRR needs alpha > 0: whitening is undefined on a rank-deficient covariance",
        ));
    }
    let d = pair.dim();
    let (r, clipped) = clip_rank(rank, d)?;
    let cov = CovariancePair::from_pair(pair, T::lit(alpha))?;
    let whiten = linalg::inv_sqrt_psd(&cov.c, cov.alpha)?;
    let w = &cov.t * &whiten;
    let f = linalg::truncated_svd_with_tol(&w, r, Some(T::PINV_REL_TOL))?;
    let k = f.reconstruct() * &whiten;
    let train_mse = pair_mse(&k, pair);
    let ridge_equivalent = r == d;
    Ok(FittedOperator {
        k,
        config: FitConfig {
            formulation: Formulation::Full,
            solver: Solver::Rrr,
            rank: if r == d { Rank::Full } else { Rank::Fixed(r) },
            alpha,
        },
        span_meta: None,
        effective_rank: f.effective_rank,
        train_mse,
        provenance: provenance(
            pair,
            route_for(d, pair.samples()),
            clipped,
            ridge_equivalent,
        ),
        basis: Some(f.u),
    })
}

fn require_taps<T: Scalar>(
    span: &SnapshotSpan<T>,
    formulation: Formulation,
) -> Result<(&DMatrix<T>, &DMatrix<T>)> {
    match (span.anchor(), span.mlp_tap()) {
        (Some(a), Some(m)) => Ok((a, m)),
        _ => Err(Error::Formulation(format!(
            "{formulation} needs the anchor A_i and MLP tap M_i, but the span (i = {}) lacks them",
            span.dims().i
        ))),
    }
}

/// Fits the operator described by `config` on one span.
pub fn fit_operator<T: Scalar>(
    span: &SnapshotSpan<T>,
    config: &FitConfig,
) -> Result<FittedOperator<T>> {
    config.validate()?;
    let dims = *span.dims();
    let fit_pair = |pair: DataMatrixPair<T>| -> Result<FittedOperator<T>> {
        let r = config.rank.resolve(dims.d);
        if let Rank::Fixed(n) = config.rank {
            if n > dims.d {
                log::warn!("requested rank {n} exceeds d = {}; clipping", dims.d);
            }
        }
        let mut op = match config.solver {
            Solver::Pcr => fit_pcr(&pair, r, config.alpha)?,
            Solver::Rrr => fit_rrr(&pair, r, config.alpha)?,
        };
        if let Rank::Fixed(n) = config.rank {
            op.provenance.rank_clipped |= n > dims.d;
        }
        Ok(op.with_context(config.formulation, dims, *config))
    };
    match config.formulation {
        Formulation::Identity => {
            let mut op = FittedOperator::identity(dims.d, Some(dims));
            let pair = stack_pairs(span)?;
            op.train_mse = pair_mse(&op.k, &pair);
            op.provenance.samples = pair.samples();
            op.provenance.dropped = pair.dropped;
            Ok(op)
        }
        Formulation::Full => fit_pair(stack_pairs(span)?),
        Formulation::Anchored => {
            require_taps(span, Formulation::Anchored)?;
            fit_pair(stack_residual_pairs(span)?)
        }
        Formulation::Replaceme => {
            let op = fit_replaceme(span, config.alpha)?;
            Ok(FittedOperator {
                config: FitConfig {
                    formulation: Formulation::Replaceme,
                    ..*config
                },
                ..op
            })
        }
    }
}

/// Endpoint ridge regression of `X_{i+p} − A_i` on `M_i`.
pub fn fit_replaceme<T: Scalar>(span: &SnapshotSpan<T>, alpha: f64) -> Result<FittedOperator<T>> {
    check_alpha(alpha)?;
    let (anchor, mlp) = require_taps(span, Formulation::Replaceme)?;
    let dims = *span.dims();
    let target = span.state(dims.p) - anchor;
    let pair = DataMatrixPair::new(mlp.clone(), target)?.drop_non_finite();
    if pair.samples() == 0 {
        return Err(Error::validation("no finite endpoint columns remain"));
    }
    let t = linalg::ridge_solve(&pair, T::lit(alpha))?;
    let train_mse = pair_mse(&t, &pair);
    Ok(FittedOperator {
        k: t,
        config: FitConfig {
            formulation: Formulation::Replaceme,
            solver: Solver::Pcr,
            rank: Rank::Full,
            alpha,
        },
        span_meta: Some(dims),
        effective_rank: dims.d,
        train_mse,
        provenance: provenance(&pair, route_for(dims.d, pair.samples()), false, false),
        basis: None,
    })
}

/// Prediction of `X_{i+q}` for the span's images.
pub fn predict<T: Scalar>(
    op: &FittedOperator<T>,
    span: &SnapshotSpan<T>,
    q: usize,
) -> Result<DMatrix<T>> {
    let dims = span.dims();
    if op.dim() != dims.d {
        return Err(Error::validation(format!(
            "operator dimension {} does not match span d = {}",
            op.dim(),
            dims.d
        )));
    }
    if q == 0 || q > dims.p {
        return Err(Error::validation(format!(
            "step q = {q} outside 1..={}",
            dims.p
        )));
    }
    let x_i = span.state(0);
    match op.formulation() {
        Formulation::Identity => Ok(x_i.clone()),
        Formulation::Full => Ok(linalg::matrix_power(&op.k, q) * x_i),
        Formulation::Anchored => {
            let (a, m) = require_taps(span, Formulation::Anchored)?;
            Ok(a + linalg::matrix_power(&op.k, q) * m)
        }
        Formulation::Replaceme => {
            let p = op.span_meta.map(|s| s.p).unwrap_or(dims.p);
            if q != p {
                return Err(Error::UnsupportedStep {
                    formulation: "replaceme".into(),
                    step: q,
                    p,
                });
            }
            let (a, m) = require_taps(span, Formulation::Replaceme)?;
            Ok(a + &op.k * m)
        }
    }
}

/// Endpoint MSE `‖X_{i+p} − X̂_{i+p}‖²_F / (B·t_kept)` of `op` on `span`.
pub fn endpoint_mse<T: Scalar>(op: &FittedOperator<T>, span: &SnapshotSpan<T>) -> Result<f64> {
    let p = span.dims().p;
    let pred = predict(op, span, p)?;
    let resid = span.state(p) - pred;
    Ok(resid.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / resid.ncols() as f64)
}
