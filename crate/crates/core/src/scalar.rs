use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of every tensor. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal, rounding to the target precision.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable as scalar")
    }

    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("count representable as scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar widens to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
