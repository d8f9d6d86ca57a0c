//! Distributional reinforcement learning with Sinkhorn divergences.
//!
//! Particle return distributions (`particles`, `value_dist`), divergences and
//! their gradients (`divergence`, `sinkhorn`), finite MDPs (`envs`), the
//! training loop (`agent`) and contraction and interpolation studies
//! (`analysis`).

pub mod agent;
pub mod analysis;
pub mod divergence;
pub mod envs;
pub mod error;
pub mod particles;
pub mod sinkhorn;
pub mod value_dist;

pub use error::{Error, Result};
pub use particles::ParticleSet;
