use nalgebra::{DMatrix, SVD};
use num_complex::Complex;

use super::fit::FittedOperator;
use crate::{linalg, Error, Result, Scalar};

/// Relative eigenvector residual above which a decomposition is reported as
/// eigenvalues only.
pub const EIG_RESIDUAL_TOL: f64 = 1e-6;

const CLUSTER_TOL: f64 = 1e-8;
const INDEPENDENCE_TOL: f64 = 1e-10;

/// Spectral decomposition of a reduced operator `K̃ = U_rᵀ K U_r`.
#[derive(Debug, Clone)]
pub struct ModeSet<T: Scalar> {
    /// Sorted by modulus, descending.
    pub eigenvalues: Vec<Complex<T>>,
    /// `d × r` lifted modes `φ = U_r w`; absent when `defective`.
    pub modes: Option<DMatrix<Complex<T>>>,
    /// `r × r` eigenvectors `w` of `K̃`; absent when `defective`.
    pub eigenvectors: Option<DMatrix<Complex<T>>>,
    pub reduced: DMatrix<T>,
    pub basis: DMatrix<T>,
    /// Eigenvectors could not be resolved (non-diagonalizable or residual
    /// above [`EIG_RESIDUAL_TOL`]).
    pub defective: bool,
}

impl<T: Scalar> ModeSet<T> {
    pub fn rank(&self) -> usize {
        self.reduced.nrows()
    }

    pub fn spectral_radius(&self) -> f64 {
        self.eigenvalues
            .iter()
            .map(|l| cabs(*l))
            .fold(0.0, f64::max)
    }
}

/// Modulus of a complex scalar, in f64.
pub fn cabs<T: Scalar>(c: Complex<T>) -> f64 {
    c.re.as_f64().hypot(c.im.as_f64())
}

fn sort_spectrum<T: Scalar>(vals: &mut [Complex<T>]) {
    vals.sort_by(|a, b| {
        let (ma, mb) = (cabs(*a), cabs(*b));
        mb.partial_cmp(&ma)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(
                b.im.as_f64()
                    .partial_cmp(&a.im.as_f64())
                    .unwrap_or(std::cmp::Ordering::Equal),
            )
    });
}

fn normalize_phase<T: Scalar>(w: &mut nalgebra::DVector<Complex<T>>) {
    let norm = w.iter().map(|c| c.norm_sqr().as_f64()).sum::<f64>().sqrt();
    let (_, pivot) = w.iter().enumerate().fold((0.0, 0), |(best, at), (j, c)| {
        let m = cabs(*c);
        if m > best + 1e-12 {
            (m, j)
        } else {
            (best, at)
        }
    });
    let p = w[pivot];
    let pn = T::lit(cabs(p));
    let phase = if pn > T::zero() {
        p.conj() / Complex::new(pn, T::zero())
    } else {
        Complex::new(T::one(), T::zero())
    };
    let scale = Complex::new(T::lit(1.0 / norm.max(f64::MIN_POSITIVE)), T::zero());
    for c in w.iter_mut() {
        *c = *c * phase * scale;
    }
}

/// Eigenpairs of the reduced operator of `op` truncated to `rank`.
///
/// Uses the basis stored by the fit when available, otherwise the left
/// singular vectors of `K`.
pub fn extract_modes<T: Scalar>(op: &FittedOperator<T>, rank: usize) -> Result<ModeSet<T>> {
    if rank == 0 {
        return Err(Error::validation("rank must be at least 1"));
    }
    let basis_full = match op.basis() {
        Some(b) => b.clone(),
        None => linalg::truncated_svd_with_tol(op.k(), op.dim(), Some(T::PINV_REL_TOL))?.u,
    };
    let r = rank.min(basis_full.ncols());
    if r == 0 {
        return Err(Error::validation("operator has no non-zero direction"));
    }
    let basis = basis_full.columns(0, r).into_owned();
    let reduced = basis.transpose() * op.k() * &basis;
    modes_of(reduced, basis)
}

/// Eigen-decomposition of an explicit reduced operator with its lifting basis.
pub fn modes_of<T: Scalar>(reduced: DMatrix<T>, basis: DMatrix<T>) -> Result<ModeSet<T>> {
    let r = reduced.nrows();
    if !reduced.is_square() || basis.ncols() != r {
        return Err(Error::validation(
            "reduced operator and basis disagree in rank",
        ));
    }
    if reduced.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation(
            "reduced operator holds non-finite values",
        ));
    }
    let mut eigenvalues: Vec<Complex<T>> = reduced.complex_eigenvalues().iter().copied().collect();
    sort_spectrum(&mut eigenvalues);

    let kc: DMatrix<Complex<T>> = reduced.map(|v| Complex::new(v, T::zero()));
    let scale = reduced.norm().as_f64().max(1.0);
    let mut vectors = DMatrix::<Complex<T>>::zeros(r, r);
    let mut defective = false;
    let mut assigned = vec![false; r];

    for j in 0..r {
        if assigned[j] {
            continue;
        }
        let lam = eigenvalues[j];
        let tol = CLUSTER_TOL * cabs(lam).max(1.0);
        let group: Vec<usize> = (j..r)
            .filter(|&k| !assigned[k] && cabs(eigenvalues[k] - lam) <= tol)
            .collect();
        let mut shifted = kc.clone();
        for i in 0..r {
            shifted[(i, i)] -= lam;
        }
        let svd = SVD::new(shifted, false, true);
        let v_t = svd
            .v_t
            .ok_or_else(|| Error::validation("eigenvector SVD did not converge"))?;
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| {
            svd.singular_values[a]
                .partial_cmp(&svd.singular_values[b])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        for (slot, &k) in group.iter().enumerate() {
            let mut w = v_t.row(order[slot]).adjoint();
            normalize_phase(&mut w);
            let resid = (&kc * &w - &w * eigenvalues[k]).norm().as_f64() / scale;
            if resid > EIG_RESIDUAL_TOL {
                defective = true;
            }
            vectors.set_column(k, &w);
            assigned[k] = true;
        }
    }

    if !defective {
        let sv = vectors.clone().singular_values();
        let max = sv.iter().map(|s| s.as_f64()).fold(0.0, f64::max);
        let min = sv.iter().map(|s| s.as_f64()).fold(f64::INFINITY, f64::min);
        if !(max > 0.0) || min / max < INDEPENDENCE_TOL {
            defective = true;
        }
    }
    if defective {
        log::warn!("reduced operator is (near-)defective; reporting eigenvalues only");
        return Ok(ModeSet {
            eigenvalues,
            modes: None,
            eigenvectors: None,
            reduced,
            basis,
            defective,
        });
    }
    let basis_c = basis.map(|v| Complex::new(v, T::zero()));
    let modes = &basis_c * &vectors;
    Ok(ModeSet {
        eigenvalues,
        modes: Some(modes),
        eigenvectors: Some(vectors),
        reduced,
        basis,
        defective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jordan_block_is_defective() {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let m = modes_of(k, DMatrix::identity(2, 2)).unwrap();
        assert!(m.defective);
        assert!(m.modes.is_none());
        assert_eq!(m.eigenvalues.len(), 2);
    }

    #[test]
    fn repeated_but_diagonalizable() {
        let m = modes_of(
            DMatrix::<f64>::identity(3, 3) * 0.5,
            DMatrix::identity(3, 3),
        )
        .unwrap();
        assert!(!m.defective);
        for l in &m.eigenvalues {
            assert!((l.re - 0.5).abs() < 1e-12 && l.im.abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_spectrum() {
        let th = 0.3f64;
        let k = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
        let m = modes_of(k.clone(), DMatrix::identity(2, 2)).unwrap();
        assert!(!m.defective);
        let w = m.eigenvectors.as_ref().unwrap();
        let kc = k.map(|v| Complex::new(v, 0.0));
        for j in 0..2 {
            let col = w.column(j);
            assert!((&kc * col - col * m.eigenvalues[j]).norm() < 1e-8);
        }
        assert!(m.eigenvalues[0].im > 0.0);
    }
}
