//! Cloud volume reconstruction from a single view with a latent diffusion
//! prior and a differentiable volume renderer.

pub mod cloudgen;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod metrics;
pub mod monoplanar;
pub mod nn;
pub mod posterior;
pub mod render;
pub mod rng;
pub mod volume;

pub use error::{NimbusError, Result};
pub use volume::DenseGrid3;
