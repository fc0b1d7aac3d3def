//! Scalar abstraction shared by the numerical modules.

use std::fmt::{Debug, Display, LowerExp};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real floating-point type the kernels are instantiated with.
pub trait Scalar:
    RealField + Copy + FromPrimitive + ToPrimitive + Debug + Display + LowerExp + Send + Sync + 'static
{
    /// Relative singular-value cutoff for pseudoinverses.
    const PINV_REL_TOL: f64;
    /// Relative eigenvalue cutoff when a pseudoinverse is taken through `Z Zᵀ`.
    const COV_REL_TOL: f64;
    /// Short type tag used in diagnostics.
    const NAME: &'static str;

    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f64 {
    const PINV_REL_TOL: f64 = 1e-12;
    const COV_REL_TOL: f64 = 1e-12;
    const NAME: &'static str = "f64";
}

impl Scalar for f32 {
    const PINV_REL_TOL: f64 = 1e-6;
    const COV_REL_TOL: f64 = 1e-5;
    const NAME: &'static str = "f32";
}
