//! Floating-point element type shared by tiles, layers and datasets.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Element type of the simulator: `f32` or `f64`.
///
/// Device and converter parameters are kept as `f64` configuration values;
/// they are converted with [`Scalar::lit`] where they meet weight or
/// activation data. Random numbers are always drawn as `f64` and then
/// converted, so a given seed consumes the stream identically for either
/// element type.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Largest absolute value of a sequence, `0` for an empty one.
pub(crate) fn max_abs<'a, T: Scalar>(xs: impl IntoIterator<Item = &'a T>) -> T {
    xs.into_iter().fold(T::zero(), |m, &v| m.max(v.abs()))
}
