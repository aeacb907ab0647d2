//! Minimal neural-network layers with explicit forward/backward passes.
//!
//! Layers are generic over [`Scalar`] so the whole model runs in f32 for
//! training/inference and in f64 for finite-difference gradient checks.
//! Every layer exposes `forward` (no bookkeeping) and a `forward_t` variant
//! returning the cache its `backward` needs; `backward` accumulates parameter
//! gradients and returns the input gradient.

mod conv2d;
mod conv3d;
mod groupnorm;
mod linear;
pub mod ops;
mod opt;
pub(crate) mod param;
mod scalar;

pub use conv2d::{Conv2d, Conv2dCache};
pub use conv3d::{Conv3d, Conv3dCache, Init};
pub use groupnorm::{GroupNorm, GroupNormCache};
pub use linear::{Linear, LinearCache};
pub use opt::{clip_global_norm, Adam, AdamConfig};
pub use param::{Param, ParamVisitor, Parameterized};
pub use scalar::Scalar;
