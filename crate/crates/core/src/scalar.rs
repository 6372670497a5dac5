//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! Everything generic in this crate is written against [`Real`], which is
//! implemented for `f32` and `f64`. Decompositions come from `nalgebra`, so the
//! trait sits on top of its `RealField`; conversions go through `num-traits`.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};
use std::iter::Sum;

/// A real floating-point scalar usable throughout the emulation pipeline.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive + Sum + 'static {
    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("every f64 is representable (possibly rounded)")
    }

    /// Widens (or passes through) to `f64`.
    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Machine epsilon of the scalar type.
    fn epsilon() -> Self;
}

impl Real for f64 {
    #[inline]
    fn epsilon() -> Self {
        f64::EPSILON
    }
}

impl Real for f32 {
    #[inline]
    fn epsilon() -> Self {
        f32::EPSILON
    }
}
