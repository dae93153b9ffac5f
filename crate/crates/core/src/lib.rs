//! Animatable two-hand avatars rendered with differentiable Gaussian splatting.

pub mod cli;
pub mod data;
pub mod error;
pub mod features;
pub mod gaussians;
pub mod gradcheck;
pub mod graph;
pub mod hand;
pub mod interaction;
pub mod optimize;
pub mod raster;

pub use error::{Error, Result};
