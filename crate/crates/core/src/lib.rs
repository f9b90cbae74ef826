//! Spatial-wise instance whitening and channel-wise moment normalization
//! inside a small U-Net for underwater image enhancement.
//!
//! The crate carries its own tensor type and tape-based autodiff
//! ([`tensor`]), the two normalization schemes ([`normalization`]), the
//! network ([`model`]), losses, an Adam trainer with a bit-exact checkpoint
//! format, a synthetic underwater degradation generator, PSNR/SSIM, and the
//! invariant suites behind `scnet verify`.

pub mod data;
pub mod error;
pub mod exec;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod normalization;
pub mod params;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use params::{Bindings, ParamId, ParamStore};
pub use tensor::{Graph, Real, Tensor, Var};
