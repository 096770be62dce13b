//! Floating-point scalar abstraction shared by the projection math and the
//! autodiff engine.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// A real scalar the numeric core can be instantiated over (`f32`, `f64`).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Short type name used in file headers.
    const NAME: &'static str;

    /// Lossy conversion from `f64` (rounds to nearest for `f32`).
    fn of(v: f64) -> Self;

    /// Widening conversion to `f64`.
    fn widen(self) -> f64;
}

impl Scalar for f32 {
    const NAME: &'static str = "float32";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "float64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn widen(self) -> f64 {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversions() {
        assert_eq!(f32::of(0.1), 0.1f32);
        assert_eq!(0.5f32.widen(), 0.5);
        assert_eq!(f64::of(1e300), 1e300);
        assert_eq!(<f32 as Scalar>::NAME, "float32");
    }
}
