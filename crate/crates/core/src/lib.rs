//! Desk-scale visual storytelling: a small latent-free diffusion denoiser
//! conditioned on text and on a fused history of earlier frames.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod encoders;
pub mod fusion;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod ops;
pub mod param;
pub mod pipeline;
pub mod rng;
pub mod story;
pub mod tensor;
pub mod train;

pub use error::{Result, VistaError};
pub use tensor::{Scalar, Tensor};
