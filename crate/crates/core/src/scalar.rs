//! Scalar abstraction shared by every numeric module.
//!
//! Training loops run in `f32`; oracle suites and gradient checks run in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Real scalar usable throughout the crate.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Short name used in reports ("f32" / "f64").
    const NAME: &'static str;

    /// Lossless for `f32`, rounding for `f64`.
    fn to_f32(self) -> f32;
    fn from_f32(v: f32) -> Self;

    #[inline]
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    #[inline]
    fn count(v: usize) -> Self {
        Self::of(v as f64)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn to_f32(self) -> f32 {
        self
    }

    #[inline]
    fn from_f32(v: f32) -> Self {
        v
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn to_f32(self) -> f32 {
        self as f32
    }

    #[inline]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
}
