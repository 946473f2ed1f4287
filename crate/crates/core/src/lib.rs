//! Memory-augmented latent diffusion transformer for blockwise autoregressive
//! generation of long frame sequences, with the training/sampling engine and
//! an experiment harness built around it.

pub mod codec;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod sampling;

pub use error::{Error, Result};
