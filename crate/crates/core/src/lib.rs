//! Identity-conditioned mini video diffusion transformer, from scratch.
//!
//! This crate implements a desk-scale diffusion transformer for video latents
//! with a conditional image branch: a reference image is tokenized into a
//! second stream that shares the transformer weights, attends only to itself,
//! lends its keys/values to the video stream, and is dropped before the output
//! head. The supporting pieces — deterministic tensor kernels, reverse-mode
//! autodiff, rotary position mapping, rectified-flow training and sampling
//! with a per-session KV cache, a procedural glyph dataset, and analytic
//! cost accounting — live in the modules below.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); production
//! code uses the `f32` aliases at this root, while gradient checks instantiate
//! the same code at `f64`.

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod dit;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod rng;
pub mod rope;
pub mod runcfg;
pub mod scalar;
pub mod stin;
pub mod tensor;
pub mod train;

pub use error::{CoreError, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Production scalar type.
pub type Real = f32;
/// Production tensor type.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor, used by the gradient checks.
pub type Tensor64 = Tensor<f64>;
