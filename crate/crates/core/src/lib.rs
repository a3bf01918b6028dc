//! needleforge: spatio-temporal force regression from streams of 1-D depth
//! profiles.
//!
//! The crate bundles a small autodiff tensor core, the neural layers and
//! model zoo built on it, a synthetic A-scan simulator that stands in for
//! the imaging hardware, a training loop, evaluation statistics, and a
//! framed TCP protocol for stateful streaming inference.

mod binio;

pub mod data;
pub mod error;
pub mod evaluation;
pub mod gp;
pub mod kernels;
pub mod layers;
pub mod models;
pub mod pipeline;
pub mod scalar;
pub mod serve;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
