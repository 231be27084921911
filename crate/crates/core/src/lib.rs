//! Factor a monochrome hand image into a pose feature and an appearance
//! feature, trained with heatmap supervision, reconstruction, an adversarial
//! term and a disentangle-mix-disentangle-reconstruct cycle.

pub mod error;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
