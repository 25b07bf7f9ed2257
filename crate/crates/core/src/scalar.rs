use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use rustfft::FftNum;

/// Floating-point scalar accepted by the matrix and spectral layers.
pub trait Real:
    Float + FromPrimitive + FftNum + Sum + Display + Debug + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal into `Self`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    /// Converts a count into `Self`.
    #[inline]
    fn count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    /// The constant pi.
    #[inline]
    fn pi() -> Self {
        Self::lit(std::f64::consts::PI)
    }

    /// A working tolerance: `tol` in `f64`, widened to a few ulps of `Self`.
    #[inline]
    fn tol(tol: f64) -> Self {
        Self::lit(tol).max(Self::epsilon() * Self::lit(64.0))
    }
}

impl Real for f32 {}
impl Real for f64 {}
