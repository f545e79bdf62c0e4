//! Scalar abstraction: every numeric kernel in this crate is generic over the
//! element type, instantiated as `f32` for training and `f64` for verification
//! (gradient checking, closed-form oracles).

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type for [`crate::tensor::Tensor`] and everything
/// built on top of it.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Short name used in run manifests ("f32" / "f64").
    const NAME: &'static str;

    /// Lossy conversion from `f64`; every literal constant goes through here.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Scalar")
    }

    /// Widening conversion to `f64` for logging and cross-precision oracles.
    fn to64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}
