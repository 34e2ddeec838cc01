//! Scalar abstraction for the numeric core.
//!
//! All tensor and graph math is generic over [`Scalar`] so the same code runs
//! at `f32` or `f64`. The shipped pipeline instantiates everything at `f64`
//! (see the aliases at the crate root): the models are tiny, and noise
//! calibration plus gradient checks want the headroom.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar usable by the tensor/autodiff core.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`, used for constants and RNG draws.
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any Scalar")
    }

    /// Widening conversion to `f64`, used for reports and serialization.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_generic<S: Scalar>(xs: &[S]) -> S {
        xs.iter().copied().sum()
    }

    #[test]
    fn works_at_both_widths() {
        assert_eq!(sum_generic(&[1.0f32, 2.0, 3.0]), 6.0f32);
        assert_eq!(sum_generic(&[1.0f64, 2.0, 3.0]), 6.0f64);
        assert_eq!(f32::from_f64_lossy(0.5), 0.5f32);
        assert_eq!(2.0f64.to_f64_lossy(), 2.0);
    }
}
