//! Speech-driven 3D facial animation with a conditional denoising diffusion
//! model: data handling, speech features, the diffusion process, the facial
//! decoder, training, evaluation metrics and the command-line front end.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod runner;
pub mod seed;
pub mod speech;
pub mod trainer;

pub use error::{Error, Result};
