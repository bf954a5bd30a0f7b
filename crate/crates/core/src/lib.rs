//! Evidential deep learning for open-set classification.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod debias;
pub mod error;
pub mod evidential;
pub mod gradsuite;
pub mod hsic;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod sweep;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
