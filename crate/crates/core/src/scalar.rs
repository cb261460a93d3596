//! Scalar abstraction shared by the numeric modules.
//!
//! Everything on the loss and metric path is written against [`Scalar`], which
//! is implemented for `f32` and `f64`. The model body runs in `f32` during
//! training, while losses, gradients at the logit layer and metrics default to
//! `f64`. Gradient checks instantiate the model in `f64` as well.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real floating-point scalar: `f32` or `f64`.
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
    /// Lossy conversion from an `f64` constant.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable")
    }

    /// Conversion from a count.
    #[inline]
    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Absolute tolerance for "sums to one" checks over `n` entries.
    ///
    /// `1e-9` for `f64`; widened to a few ulps per entry for `f32`.
    fn simplex_tolerance(n: usize) -> Self {
        let ulp_bound = Self::epsilon() * Self::of_usize(n.max(1)) * Self::of(4.0);
        ulp_bound.max(Self::of(1e-9))
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Floor applied to probabilities before taking a logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// `ln(max(p, LOG_FLOOR))`.
#[inline]
pub fn safe_ln<T: Scalar>(p: T) -> T {
    p.max(T::of(LOG_FLOOR)).ln()
}
