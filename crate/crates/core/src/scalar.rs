//! Floating-point abstraction shared by the numerical modules.

use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::ToPrimitive;

/// Real scalar the reconciliation core is generic over.
///
/// Implemented for `f32` and `f64`. Structural matrices are always built with
/// exact integers and only converted to `T` at the point of use.
pub trait Scalar: RealField + Copy + ToPrimitive + Debug + Display + Send + Sync + 'static {
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn of(x: f64) -> Self {
        nalgebra::convert(x)
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        nalgebra::convert(n as f64)
    }

    #[inline]
    fn from_int(v: i64) -> Self {
        nalgebra::convert(v as f64)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn is_finite_value(self) -> bool {
        self.as_f64().is_finite()
    }

    /// Absolute coherence tolerance before scaling by `max(1, ‖y‖∞)`.
    ///
    /// `1e-8` for `f64`; single precision cannot resolve that, so it gets a
    /// few hundred ulps instead.
    fn coherence_tol() -> Self;
}

impl Scalar for f64 {
    #[inline]
    fn coherence_tol() -> Self {
        1e-8
    }
}

impl Scalar for f32 {
    #[inline]
    fn coherence_tol() -> Self {
        // ~ 500 * f32::EPSILON
        6e-5
    }
}

/// Max-abs norm of a slice, zero for an empty slice.
pub fn max_abs<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |acc, x| acc.max(x.abs()))
}
