//! Randomized-smoothing certification and certificate-spoofing attacks.

pub mod attacks;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod report;
pub mod rng;
pub mod saliency;
pub mod smoothing;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Image, Mask, Shape, Tensor};
