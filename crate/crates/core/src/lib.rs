//! Train a small convolutional network on MNIST-family data, ablate its
//! units, record and embed its activations, and score how selectively its
//! neurons respond to, and matter for, each class.

pub mod ablation;
pub mod activations;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod report;

pub use error::{Error, Result};
