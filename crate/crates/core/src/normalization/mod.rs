//! Spatial-wise instance whitening, channel-wise moment normalization with
//! re-injection, and the squeeze-and-excitation gate.

mod channel;
mod se;
mod whitening;

pub use channel::{channel_norm, reinject_moments, MomentMaps, ReinjectionHead, ReinjectionMode};
pub use se::{se_block, SeBlock};
pub use whitening::{
    instance_whiten, inv_sqrt_newton_schulz, GroupSize, InvSqrtMethod, WhiteningConfig, WhiteningLayer,
};

/// Regularizer used by both normalizations unless configured otherwise.
pub const DEFAULT_ALPHA: f64 = 1e-5;
