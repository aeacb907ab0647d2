//! Sparse-timestep voxel-space diffusion for 3D volume enhancement.
//!
//! The library trains and samples a conditional 3D UNet denoiser on a small
//! set of uniformly subsampled diffusion timesteps. The network predicts the
//! clean volume directly and is supervised in velocity space; an optional
//! structure-conditioned modulation module (STM) recalibrates the time
//! embedding of every residual block from a compact descriptor of the
//! degraded input, so structurally different patches follow different
//! denoising trajectories over the shared sparse schedule.
//!
//! Volumes are processed as overlapping 3D patches and reassembled with a
//! windowed partition-of-unity stitch, which keeps memory bounded on large
//! grids. Everything is seeded and deterministic: the same seed reproduces
//! the same synthetic data, the same training run, and the same enhanced
//! output byte for byte.

pub mod checkpoint;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod model;
pub mod modulation;
pub mod net;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod schedule;
pub mod synth;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
