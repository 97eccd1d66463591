//! Pixel-importance landscapes of convolutional networks: exact lattice path
//! counting, closed-form importance predictions at initialization, a
//! differentiable importance-landscape operator, and the two landscape
//! regularization losses with a desk-scale training loop.

pub mod archspec;
pub mod emit;
pub mod engine;
pub mod error;
pub mod landscape;
pub mod lattice;
pub mod theory;

pub use error::{Error, Result};
