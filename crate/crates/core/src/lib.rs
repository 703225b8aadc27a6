//! Gaussian conditional random field output layer for image colorization.
//!
//! The layer turns a similarity structure over pixels and sparse (or dense)
//! color evidence into a globally consistent chroma field by solving one
//! symmetric positive definite linear system per image. The crate also
//! carries the closed-form backward pass, a desk-scale two-stage training
//! pipeline with a mixture density over latent codes, and the evaluation
//! metrics used to measure controllability and diversity.

pub mod color;
pub mod edits;
pub mod error;
pub mod eval;
mod formats;
pub mod gcrf;
pub mod gradcheck;
pub mod image;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod similarity;
pub mod synthetic;

pub use error::{GcrfError, Result};
