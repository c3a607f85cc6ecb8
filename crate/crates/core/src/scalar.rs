//! Scalar abstraction for the numerical core.
//!
//! Every kernel that only does linear algebra and elementary functions is
//! written against [`Real`], so the same code runs in `f32` for large,
//! memory-bound fits and in `f64` where tight tolerances matter.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};

pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn of_usize(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("usize representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).unwrap_or(f64::NAN)
    }

    fn infinity() -> Self;

    /// Short type name recorded in saved models.
    const NAME: &'static str;
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    fn infinity() -> Self {
        f32::INFINITY
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    fn infinity() -> Self {
        f64::INFINITY
    }
}
