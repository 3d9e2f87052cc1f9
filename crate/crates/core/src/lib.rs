//! Object detection as conditional flow matching over box space.

pub mod checkpoint;
pub mod config;
pub mod coupling;
pub mod decoder;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod nnet;
pub mod priors;
pub mod rng;
pub mod sampling;
pub mod scenes;
pub mod trainer;

pub use error::{Error, Result};
