//! Workbench for small variational autoencoders: training, targeted
//! adversarial attacks on latent codes and outputs, and resistance scoring
//! via the area under the normalized distortion-distortion curve.

pub mod attack;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod models;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
