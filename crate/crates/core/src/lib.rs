//! Multi-stage disentangled generative modelling at desk scale.
//!
//! The crate is organized around a dense-tensor reverse-mode autodiff core
//! that is generic over the scalar type ([`Scalar`]): `f32` for training,
//! `f64` for verification. The exact-probability d-separation engine
//! ([`dsep`]) uses arbitrary-precision rationals instead of floats.
//!
//! Layers: [`tensor`]/[`tape`] (values and gradients), [`nn`] (dense layers,
//! AdaIN/FiLM, Adam), [`dist`] (Gaussians, Bernoulli, GMM+EM), [`data`]
//! (synthetic factor dataset), the model stages ([`stage1`], [`stage2`],
//! [`flow`], [`pendulum`]), [`metrics`] (MI/MIG/Fréchet), and [`io`]
//! (MSTN/MSMD binary formats).

pub mod data;
pub mod dist;
pub mod dsep;
pub mod error;
pub mod flow;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod pendulum;
pub mod rng;
pub mod scalar;
pub mod stage1;
pub mod stage2;
pub mod tape;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{grad_check, Gradients, NodeId, Tape};
pub use tensor::Tensor;

/// Training-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Verification-precision tensor.
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
