use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::snapshot::{SnapshotSpan, SpanDims};
use crate::{Error, Result, Scalar};

pub const MAX_SPECTRAL_RADIUS: f64 = 1.05;
const MAX_GROWTH: f64 = 1e3;

/// Exact dynamics `X_{q+1} = K★ X_q`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem<T: Scalar> {
    k_star: DMatrix<T>,
}

pub(crate) fn spectral_radius<T: Scalar>(k: &DMatrix<T>) -> f64 {
    k.complex_eigenvalues()
        .iter()
        .map(|l| crate::operators::cabs(*l))
        .fold(0.0, f64::max)
}

impl<T: Scalar> LinearSystem<T> {
    pub fn new(k_star: DMatrix<T>) -> Result<Self> {
        if !k_star.is_square() || k_star.nrows() == 0 {
            return Err(Error::validation(format!(
                "K* must be square and non-empty, got {:?}",
                k_star.shape()
            )));
        }
        if k_star.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("K* holds non-finite values"));
        }
        let rho = spectral_radius(&k_star);
        if rho > MAX_SPECTRAL_RADIUS {
            return Err(Error::validation(format!(
                "spectral radius {rho:.4} exceeds {MAX_SPECTRAL_RADIUS}"
            )));
        }
        Ok(Self { k_star })
    }

    /// Gaussian `K★` rescaled to spectral radius `rho`.
    pub fn random(d: usize, rho: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..d * d)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let g = DMatrix::from_fn(d, d, |r, c| vals[r * d + c]);
        let current = spectral_radius(&g);
        if current == 0.0 {
            return Err(Error::validation("random draw has zero spectral radius"));
        }
        let k = g * (rho / current);
        Self::new(k.map(T::lit))
    }

    pub fn k_star(&self) -> &DMatrix<T> {
        &self.k_star
    }

    pub fn dim(&self) -> usize {
        self.k_star.nrows()
    }

    pub fn spectral_radius(&self) -> f64 {
        spectral_radius(&self.k_star)
    }
}

/// Trajectory from a seeded standard-normal `X_0`, with anchor `0` and MLP
/// tap `X_0` so the anchored formulation reduces to the full one.
pub fn generate_linear_span<T: Scalar>(
    system: &LinearSystem<T>,
    dims: SpanDims,
    seed: u64,
) -> Result<SnapshotSpan<T>> {
    dims.validate()?;
    if dims.d != system.dim() {
        return Err(Error::validation(format!(
            "span d = {} but K* is {1}×{1}",
            dims.d,
            system.dim()
        )));
    }
    let cols = dims.columns();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vals: Vec<f64> = (0..dims.d * cols)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let x0 = DMatrix::from_fn(dims.d, cols, |r, c| T::lit(vals[c * dims.d + r]));
    let n0 = x0.norm().as_f64();
    let mut states = vec![x0];
    for q in 0..dims.p {
        let next = system.k_star() * &states[q];
        let n = next.norm().as_f64();
        if !n.is_finite() || n > MAX_GROWTH * n0 {
            return Err(Error::Generation {
                block: q + 1,
                reason: format!("trajectory norm {n:e} grew beyond {MAX_GROWTH}x the input"),
            });
        }
        states.push(next);
    }
    let anchor = DMatrix::zeros(dims.d, cols);
    let tap = states[0].clone();
    SnapshotSpan::new(dims, states, Some(anchor), Some(tap))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radius_bound() {
        assert!(LinearSystem::new(DMatrix::<f64>::identity(3, 3) * 1.1).is_err());
        let s = LinearSystem::<f64>::random(6, 0.9, 1).unwrap();
        assert!((s.spectral_radius() - 0.9).abs() < 1e-10);
    }

    #[test]
    fn zero_dynamics() {
        let s = LinearSystem::new(DMatrix::<f64>::zeros(3, 3)).unwrap();
        let span = generate_linear_span(&s, SpanDims::from_kept(3, 2, 2, 3, 0, 3, 0), 5).unwrap();
        assert!(span.state(0).amax() > 0.0);
        for q in 1..=3 {
            assert_eq!(span.state(q).amax(), 0.0);
        }
    }
}
