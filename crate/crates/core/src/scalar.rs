//! Scalar abstraction for the numeric kernels.
//!
//! Everything numeric in this crate is generic over [`Scalar`] so the same
//! code runs in `f32` (production precision) and `f64` (used by the gradient
//! checks, where finite differences in single precision would mostly measure
//! rounding noise). Concrete aliases live at the crate root.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type accepted by the tensor kernels.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    /// Converts an `f64` literal into this scalar type.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal representable in scalar type")
    }

    /// Widens to `f64` (exact for both supported types).
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }

    /// Bit pattern, zero-extended to 64 bits; used for bit-exact comparisons.
    fn bits(self) -> u64;
}

impl Scalar for f32 {
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Scalar for f64 {
    fn bits(self) -> u64 {
        self.to_bits()
    }
}
