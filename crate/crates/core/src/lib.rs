//! Unrolled Bayesian gradient-descent reconstruction for parallel-beam CT.

pub mod baselines;
pub mod cascade;
pub mod container;
pub mod error;
pub mod experiment;
pub mod image;
pub mod inference;
pub mod metrics;
pub mod phantoms;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod tomo;
pub mod variational;

pub use error::{Error, Result};
pub use image::Image;
