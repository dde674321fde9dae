//! Scalar abstraction for the closed-form math.
//!
//! The entropy, photon-statistics and finite-key routines are written once
//! against [`Real`] and instantiated for `f32` and `f64`. The simulator and
//! the protocol stack use `f64` throughout.

use std::fmt::Debug;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point scalar usable by the bound and rate formulas.
pub trait Real:
    Float + FloatConst + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).unwrap_or_else(Self::nan)
    }

    /// Conversion from an event count.
    #[inline]
    fn count(n: u64) -> Self {
        Self::from_u64(n).unwrap_or_else(Self::nan)
    }
}

impl Real for f32 {}
impl Real for f64 {}
