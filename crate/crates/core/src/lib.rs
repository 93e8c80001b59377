//! Explanation-aware model inversion: classifiers with saliency
//! explanations, inversion models that reconstruct inputs from
//! (prediction, explanation) tuples, surrogate attention transfer for
//! non-explainable targets, and privacy-leakage metrics.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod image;
pub mod inversion;
pub mod io;
pub mod metrics;
pub mod spec;
pub mod surrogate;
pub mod xai;
pub mod zoo;

pub use error::{Error, Result};
pub use xaimi_nn::Parallelism;
