//! Working-precision scalars.
//!
//! Merge arithmetic, the toy gradient oracle and the spectral code are written
//! once against [`Scalar`]; `f32` is the production working precision and `f64`
//! the exact test mode.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

use crate::checkpoint::Dtype;

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Storage dtype matching this scalar exactly.
    const DTYPE: Dtype;

    /// Rounds to nearest-even when `Self` is narrower than `f64`.
    fn from_f64_rne(v: f64) -> Self;

    fn to_f64_exact(self) -> f64;

    /// Convert a plain literal such as `0.5`.
    fn lit(v: f64) -> Self {
        Self::from_f64_rne(v)
    }
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    #[inline]
    fn from_f64_rne(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64_exact(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    #[inline]
    fn from_f64_rne(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64_exact(self) -> f64 {
        self
    }
}
