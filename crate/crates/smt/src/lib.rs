//! White-box unsupervised representation learning with the sparse manifold
//! transform: sparse feature lifting over a landmark dictionary, co-occurrence
//! statistics, and a closed-form spectral projection, plus the image and word
//! pipelines built on top.

pub mod ablation;
pub mod artifact;
pub mod config;
pub mod dataset;
pub mod dictionary;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod pipeline;
pub mod preprocess;
pub mod representation;
pub mod smt_core;
pub mod sparse;
pub mod spiral;
pub mod word;

pub use error::{Result, SmtError};
