//! Scalar abstraction for the dense math layer.
//!
//! The tensor and sampling code is generic over the floating-point type so the
//! same kernels serve `f32` and `f64`. Everything above the math layer (model,
//! losses, optimizer) is pinned to `f64`: the SPSA estimator divides a small
//! loss difference by `2ε`, and single-precision cancellation there would
//! corrupt the projected gradient.

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable by the dense math layer.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, used when materializing samples drawn in
    /// double precision.
    fn from_f64_lossy(v: f64) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
}
