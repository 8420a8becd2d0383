//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! Embedding files are always 32-bit, but the engine itself is generic so the
//! same code path can run in `f64` for gradient checks and oracle comparisons.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point type the engine can run on.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal, which is always representable (possibly rounded).
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn from_f32_lossless(x: f32) -> Self {
        Self::from_f32(x).expect("f32 value representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self.to_f32().unwrap_or(f32::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts a slice of stored `f32` values into the engine scalar.
pub fn cast_slice<T: Scalar>(xs: &[f32]) -> Vec<T> {
    xs.iter().map(|&x| T::from_f32_lossless(x)).collect()
}

/// Converts engine scalars back to the 32-bit storage type.
pub fn to_f32_vec<T: Scalar>(xs: &[T]) -> Vec<f32> {
    xs.iter().map(|x| x.as_f32()).collect()
}
