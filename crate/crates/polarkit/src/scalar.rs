//! Scalar abstraction for the numeric core.
//!
//! The toy decoder model, the loss functions, and the training loops are
//! generic over the floating-point type. `f64` is used wherever gradient
//! fidelity is checked against finite differences; `f32` halves the memory
//! traffic for the desk-scale end-to-end runs.

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating-point scalar for model parameters and losses: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + std::iter::Sum + std::fmt::Debug + Send + Sync + 'static
{
    /// Name of the scalar type as stored in checkpoint files.
    const TAG: &'static str;

    fn of(value: f64) -> Self {
        Self::from_f64(value).expect("finite f64 converts to any Scalar")
    }

    /// Widening conversion. Named to avoid colliding with
    /// `ToPrimitive::to_f64`, which `Float` brings into method resolution and
    /// which returns an `Option`.
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {
    const TAG: &'static str = "f32";
}

impl Scalar for f64 {
    const TAG: &'static str = "f64";
}
