//! Pose-agnostic, instance-aware test-time adaptation for monocular depth.
//!
//! The crate bundles a small reverse-mode tensor engine, a U-Net style depth
//! network, a synthetic driving-scene generator with domain shifts,
//! panoptic-mask handling, the adaptation losses and online loop, and an
//! evaluation and reporting layer. Numerical code is generic over
//! [`Scalar`] (`f32` or `f64`).

pub mod adapt;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod net;
pub mod scalar;
pub mod scene;
pub mod segmentation;
pub mod signal;
pub mod tensor;

pub use error::{Error, ErrorCategory, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Tape64 = tensor::Tape<f64>;
pub type DepthNet32 = net::DepthNet<f32>;
pub type DepthNet64 = net::DepthNet<f64>;
