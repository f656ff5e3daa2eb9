//! Diffusion-based lifting of 2D human poses to 3D.

pub mod aggregate;
pub mod denoiser;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod optim;
pub mod pose;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
