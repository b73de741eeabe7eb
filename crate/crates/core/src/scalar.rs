//! Scalar abstraction for the numeric core.
//!
//! All model math is generic over [`Scalar`] so the same code runs in `f32`
//! for training speed and in `f64` for finite-difference gradient checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar usable throughout the numeric core: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum<Self>
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`; panics on values a float type cannot hold
    /// (does not occur for finite inputs).
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to scalar")
    }

    /// Widening conversion to `f64`.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// Numerically stable logistic sigmoid.
    fn sigmoid(self) -> Self {
        let zero = Self::zero();
        let one = Self::one();
        if self >= zero {
            one / (one + (-self).exp())
        } else {
            let e = self.exp();
            e / (one + e)
        }
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for `S::from_f64_lossy` at call sites heavy with constants.
pub fn scalar<S: Scalar>(x: f64) -> S {
    S::from_f64_lossy(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(300.0f32.sigmoid(), 1.0);
        assert_eq!((-300.0f32).sigmoid(), 0.0);
        assert_eq!(0.0f64.sigmoid(), 0.5);
        let s = (-400.0f64).sigmoid();
        assert!(s > 0.0 || s == 0.0);
        assert!(s < 1e-9);
        assert!(400.0f64.sigmoid() >= 1.0 - 1e-9);
    }

    #[test]
    fn roundtrip_f64() {
        assert_eq!(<f32 as Scalar>::from_f64_lossy(0.25), 0.25f32);
        assert_eq!(0.25f64.to_f64_lossy(), 0.25);
    }
}
