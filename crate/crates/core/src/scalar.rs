//! Floating-point abstraction so the numeric core can run at `f32` or `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Scalar type the simulator core is generic over.
///
/// `f32` (the [`crate::Real`] alias) is plenty for simulation and network
/// training; tests instantiate `f64` where tolerances are tight (running
/// variance, gradient checks).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts a finite `f64` (config values, RNG draws) into this scalar.
    fn from_f(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 must convert")
    }

    /// Converts a count into this scalar.
    fn from_n(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("count must convert")
    }

    /// Widens to `f64` for aggregate bookkeeping and text output.
    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("scalar widens to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip<F: Scalar>() {
        assert_eq!(F::from_f(2.5).as_f64(), 2.5);
        assert_eq!(F::from_n(7), F::from_f(7.0));
        assert!(F::infinity() > F::from_f(1e30));
    }

    #[test]
    fn conversions_hold_for_both_widths() {
        roundtrip::<f32>();
        roundtrip::<f64>();
    }
}
