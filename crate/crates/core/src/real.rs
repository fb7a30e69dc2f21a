use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;

/// Scalar type the field, renderer and optimizer are generic over.
///
/// `f32` is the training default; `f64` is used by the finite-difference
/// oracle tests where 1e-6 relative agreement is required.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + std::ops::AddAssign
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Cast shorthand used throughout the numeric code.
#[inline(always)]
pub fn c<F: Real>(x: f64) -> F {
    F::from_f64(x)
}
