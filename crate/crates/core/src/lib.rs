//! Collaborative filtering with diagonal Gaussian embeddings propagated by
//! Wasserstein-distance graph attention.

pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gauss;
pub mod grad;
pub mod graph;
pub mod losses;
pub mod sparse;
pub mod synth;
pub mod trainer;
pub mod uncertainty;

pub use error::{Error, Result};
