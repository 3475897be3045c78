//! Topology-preserving image editing: edits are produced only by warping a
//! template with a diffeomorphism whose latent velocity code is sampled from
//! a conditional latent diffusion model.

pub mod autodiff;
pub mod checkpoint;
pub mod datagen;
pub mod diffeo;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod metrics;
pub mod parallel;
pub mod params;
pub mod pipeline;
pub mod registration;
pub mod rng;
pub mod tensor;

pub use autodiff::{Gradients, Padding, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
