//! Dual-noise diffusion segmentation at desk scale.
//!
//! Two diffusion chains share one variance schedule: a Gaussian chain over
//! real-valued lattices and a Bernoulli chain over binary ones. A twin
//! denoiser conditioned by multi-scale image features drives both reverse
//! chains; the two decoded masks are fused by STAPLE into the final
//! segmentation. Training uses a five-term composite loss with exact
//! hand-written gradients, and everything is reproducible from one seed.

pub mod bernoulli;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fusion;
pub mod gaussian;
pub mod lattice;
pub mod nn;
pub mod pgm;
pub mod pipeline;
pub mod rng;
pub mod schedule;

pub use error::{Error, Result};
pub use lattice::MaskLattice;
pub use schedule::NoiseSchedule;
