//! Dense kernels: truncated SVD, ridge solves, PSD inverse square roots,
//! matrix powers and PCA.
//!
//! Wide data matrices (`M > 4d`) are reduced to `d × d` covariances before
//! factorizing; narrower ones are decomposed directly.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen, LU, SVD};
use serde::{Deserialize, Serialize};

use crate::snapshot::DataMatrixPair;
use crate::{Error, Result, Scalar};

/// Column count above which `Z` is reduced to `Z Zᵀ` first.
pub const COVARIANCE_ROUTE_FACTOR: usize = 4;

/// Which factorization produced a result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    /// SVD of the data matrix itself.
    Direct,
    /// Symmetric eigendecomposition of `Z Zᵀ`.
    Covariance,
}

pub fn route_for(d: usize, samples: usize) -> Route {
    if samples > COVARIANCE_ROUTE_FACTOR * d {
        Route::Covariance
    } else {
        Route::Direct
    }
}

/// Reduced SVD `A ≈ U diag(S) Vᵀ` with singular values in descending order.
#[derive(Debug, Clone)]
pub struct SvdFactors<T: Scalar> {
    pub u: DMatrix<T>,
    pub s: DVector<T>,
    pub v: DMatrix<T>,
    /// Number of factors kept after the relative cutoff, `≤` the requested rank.
    pub effective_rank: usize,
    pub route: Route,
}

impl<T: Scalar> SvdFactors<T> {
    pub fn reconstruct(&self) -> DMatrix<T> {
        let mut us = self.u.clone();
        for (j, mut col) in us.column_iter_mut().enumerate() {
            col *= self.s[j];
        }
        us * self.v.transpose()
    }
}

/// Eigenpairs of a symmetric matrix, eigenvalues sorted descending.
pub fn symmetric_eigen_desc<T: Scalar>(c: &DMatrix<T>) -> (DVector<T>, DMatrix<T>) {
    let eig = SymmetricEigen::new(c.clone());
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = DVector::from_fn(n, |j, _| eig.eigenvalues[order[j]]);
    let vectors = DMatrix::from_fn(c.nrows(), n, |r, j| eig.eigenvectors[(r, order[j])]);
    (values, vectors)
}

/// Top-`r` singular factors of `a` using the default cutoff for `T`.
pub fn truncated_svd<T: Scalar>(a: &DMatrix<T>, r: usize) -> Result<SvdFactors<T>> {
    truncated_svd_with_tol(a, r, None)
}

/// Top-`r` singular factors; singular values at or below `rel_tol · S[0]`
/// are dropped. `None` selects the route's default tolerance.
pub fn truncated_svd_with_tol<T: Scalar>(
    a: &DMatrix<T>,
    r: usize,
    rel_tol: Option<f64>,
) -> Result<SvdFactors<T>> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Err(Error::validation("cannot factorize an empty matrix"));
    }
    if r == 0 {
        return Err(Error::validation("target rank must be at least 1"));
    }
    match route_for(a.nrows(), a.ncols()) {
        Route::Direct => svd_direct(a, r, rel_tol.unwrap_or(T::PINV_REL_TOL)),
        Route::Covariance => svd_gram(a, r, rel_tol.unwrap_or(T::COV_REL_TOL)),
    }
}

fn svd_direct<T: Scalar>(a: &DMatrix<T>, r: usize, rel_tol: f64) -> Result<SvdFactors<T>> {
    let svd = SVD::new(a.clone(), true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::validation("SVD did not converge")),
    };
    let sv = svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&x, &y| {
        sv[y]
            .partial_cmp(&sv[x])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let top = sv[order[0]];
    let cutoff = top * T::lit(rel_tol);
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&j| sv[j] > cutoff && sv[j] > T::zero())
        .take(r)
        .collect();
    let k = keep.len();
    Ok(SvdFactors {
        u: DMatrix::from_fn(a.nrows(), k, |i, j| u[(i, keep[j])]),
        s: DVector::from_fn(k, |j, _| sv[keep[j]]),
        v: DMatrix::from_fn(a.ncols(), k, |i, j| v_t[(keep[j], i)]),
        effective_rank: k,
        route: Route::Direct,
    })
}

fn svd_gram<T: Scalar>(a: &DMatrix<T>, r: usize, rel_tol: f64) -> Result<SvdFactors<T>> {
    let (lam, vecs) = symmetric_eigen_desc(&(a * a.transpose()));
    let top = lam[0].max(T::zero());
    let cutoff = top * T::lit(rel_tol);
    let k = (0..lam.len())
        .take_while(|&j| lam[j] > cutoff && lam[j] > T::zero())
        .count()
        .min(r);
    let u = vecs.columns(0, k).into_owned();
    let s = DVector::from_fn(k, |j, _| lam[j].sqrt());
    let mut v = a.transpose() * &u;
    for (j, mut col) in v.column_iter_mut().enumerate() {
        col /= s[j];
    }
    Ok(SvdFactors {
        u,
        s,
        v,
        effective_rank: k,
        route: Route::Covariance,
    })
}

/// Auto- and cross-covariance `Ĉ = Z Zᵀ`, `T̂ = Z′ Zᵀ` with a ridge shift.
#[derive(Debug, Clone)]
pub struct CovariancePair<T: Scalar> {
    pub c: DMatrix<T>,
    pub t: DMatrix<T>,
    pub alpha: T,
}

impl<T: Scalar> CovariancePair<T> {
    pub fn from_pair(pair: &DataMatrixPair<T>, alpha: T) -> Result<Self> {
        if alpha < T::zero() {
            return Err(Error::validation(format!(
                "ridge alpha must be non-negative, got {alpha}"
            )));
        }
        let zt = pair.z.transpose();
        let c = &pair.z * &zt;
        let t = &pair.zp * &zt;
        Ok(Self {
            c: symmetrize(&c),
            t,
            alpha,
        })
    }

    /// `Ĉ + αI`.
    pub fn shifted(&self) -> DMatrix<T> {
        let mut c = self.c.clone();
        for j in 0..c.nrows() {
            c[(j, j)] += self.alpha;
        }
        c
    }
}

fn symmetrize<T: Scalar>(c: &DMatrix<T>) -> DMatrix<T> {
    (c + c.transpose()) * T::lit(0.5)
}

/// Ridge / least-squares operator `K = T̂ (Ĉ + αI)^{-1}`; at `α = 0` the
/// inverse is the SVD pseudoinverse.
pub fn ridge_solve<T: Scalar>(pair: &DataMatrixPair<T>, alpha: T) -> Result<DMatrix<T>> {
    if alpha < T::zero() {
        return Err(Error::validation(format!(
            "ridge alpha must be non-negative, got {alpha}"
        )));
    }
    match route_for(pair.dim(), pair.samples()) {
        Route::Covariance => {
            let cov = CovariancePair::from_pair(pair, alpha)?;
            if alpha > T::zero() {
                let shifted = cov.shifted();
                let sol_t = match Cholesky::new(shifted.clone()) {
                    Some(ch) => ch.solve(&cov.t.transpose()),
                    None => LU::new(shifted)
                        .solve(&cov.t.transpose())
                        .ok_or_else(|| Error::validation("singular ridge system"))?,
                };
                Ok(sol_t.transpose())
            } else {
                let (lam, u) = symmetric_eigen_desc(&cov.c);
                let cutoff = lam[0].max(T::zero()) * T::lit(T::COV_REL_TOL);
                let inv = DVector::from_fn(lam.len(), |j, _| {
                    if lam[j] > cutoff && lam[j] > T::zero() {
                        T::one() / lam[j]
                    } else {
                        T::zero()
                    }
                });
                Ok(&cov.t * &u * DMatrix::from_diagonal(&inv) * u.transpose())
            }
        }
        Route::Direct => {
            let f = truncated_svd_with_tol(
                &pair.z,
                pair.dim(),
                Some(if alpha > T::zero() {
                    0.0
                } else {
                    T::PINV_REL_TOL
                }),
            )?;
            let gains = f.s.map(|s| s / (s * s + alpha));
            Ok(&pair.zp * &f.v * DMatrix::from_diagonal(&gains) * f.u.transpose())
        }
    }
}

/// `(C + αI)^{-1/2}` for symmetric PSD `C`, `α > 0`. Eigenvalues are clamped
/// at zero before the shift.
pub fn inv_sqrt_psd<T: Scalar>(c: &DMatrix<T>, alpha: T) -> Result<DMatrix<T>> {
    if !c.is_square() {
        return Err(Error::validation("inv_sqrt_psd needs a square matrix"));
    }
    if alpha <= T::zero() {
        return Err(Error::validation(format!(
            "whitening needs alpha > 0, got {alpha}"
        )));
    }
    let scale = c.amax().max(T::one());
    let asym = (c - c.transpose()).amax();
    if asym > T::lit(1e-8) * scale {
        return Err(Error::validation(format!(
            "matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }
    let (lam, u) = symmetric_eigen_desc(&symmetrize(c));
    let w = lam.map(|l| T::one() / (l.max(T::zero()) + alpha).sqrt());
    Ok(symmetrize(
        &(&u * DMatrix::from_diagonal(&w) * u.transpose()),
    ))
}

/// `K^n` by binary exponentiation; `K^0 = I`.
pub fn matrix_power<T: Scalar>(k: &DMatrix<T>, n: usize) -> DMatrix<T> {
    assert!(k.is_square(), "matrix_power needs a square matrix");
    let mut result = DMatrix::identity(k.nrows(), k.ncols());
    let mut base = k.clone();
    let mut e = n;
    while e > 0 {
        if e & 1 == 1 {
            result = &result * &base;
        }
        e >>= 1;
        if e > 0 {
            base = &base * &base;
        }
    }
    result
}

/// PCA of points stored as columns.
#[derive(Debug, Clone)]
pub struct Pca<T: Scalar> {
    pub mean: DVector<T>,
    /// `d × k` orthonormal principal directions.
    pub basis: DMatrix<T>,
    /// `k × N` coordinates of the centered points.
    pub scores: DMatrix<T>,
    /// All nonzero singular values of the centered matrix, descending.
    pub singular_values: DVector<T>,
}

impl<T: Scalar> Pca<T> {
    pub fn components(&self) -> usize {
        self.basis.ncols()
    }

    pub fn project(&self, points: &DMatrix<T>) -> DMatrix<T> {
        let mut centered = points.clone();
        for mut col in centered.column_iter_mut() {
            col -= &self.mean;
        }
        self.basis.transpose() * centered
    }

    /// Fraction of total variance captured by each retained component.
    pub fn explained_variance_ratio(&self) -> Vec<T> {
        let total = self
            .singular_values
            .iter()
            .fold(T::zero(), |acc, &s| acc + s * s);
        (0..self.components())
            .map(|j| self.singular_values[j] * self.singular_values[j] / total)
            .collect()
    }
}

/// Projects the columns of `points` onto their top-`k` principal directions.
/// Each direction's largest-magnitude entry is made positive.
pub fn pca_project<T: Scalar>(points: &DMatrix<T>, k: usize) -> Result<Pca<T>> {
    let (d, n) = points.shape();
    if n < 2 {
        return Err(Error::validation("PCA needs at least two points"));
    }
    if k == 0 || k > d.min(n) {
        return Err(Error::validation(format!(
            "k = {k} must lie in 1..={}",
            d.min(n)
        )));
    }
    let mean = points.column_mean();
    let mut centered = points.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let full = match truncated_svd_with_tol(&centered, d.min(n), Some(T::PINV_REL_TOL)) {
        Ok(f) => f,
        Err(_) => {
            return Err(Error::validation("PCA of a constant point set"));
        }
    };
    if full.effective_rank == 0 {
        return Err(Error::validation("PCA of a constant point set"));
    }
    let kept = k.min(full.effective_rank);
    if kept < k {
        log::warn!("PCA: requested {k} components but the centered points have rank {kept}");
    }
    let mut basis = full.u.columns(0, kept).into_owned();
    for mut col in basis.column_iter_mut() {
        let imax = col.iamax();
        if col[imax] < T::zero() {
            col.neg_mut();
        }
    }
    let scores = basis.transpose() * &centered;
    Ok(Pca {
        mean,
        basis,
        scores,
        singular_values: full.s,
    })
}
