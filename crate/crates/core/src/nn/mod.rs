//! Neural network kernels with hand-written backward passes.
//!
//! Feature maps are `(C, D1, D2, D3)` tensors. Each layer exposes a
//! `forward` that returns its output plus whatever the matching `backward`
//! needs; there is no general autodiff graph.

pub mod conv;
pub mod norm;
pub mod ops;

pub use conv::{standardize_weights, Conv3d, ConvCache, ConvGrads, WS_EPS};
pub use norm::{GroupNorm, GroupNormCache, GroupNormGrads, GN_EPS};
pub use ops::{
    crop_backward, crop_forward, residual_add_backward, residual_add_forward,
    upsample_nearest_backward, upsample_nearest_forward, Activation,
};
