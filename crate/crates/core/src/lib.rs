//! Few-shot domain adaptation of a style-based generator, a Z+ encoder for
//! photo-to-style translation, and the metrics used to evaluate both.

pub mod adaptation;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod generator;
pub mod images;
pub mod latent;
pub mod metrics;
pub mod nn;
pub mod perceptual;
pub mod toy;

pub use error::{Error, Result};
