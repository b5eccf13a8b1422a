//! Super-resolution toolkit: dense residual networks with hand-written
//! backpropagation, Gaussian-process architecture search, and a three-level
//! test-time ensemble (self, patch and model).

pub mod cli;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod metrics;
pub mod models;
pub mod nas;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use models::{DrnConfig, Model, ModelConfig, RcanConfig};
pub use tensor::{Dihedral, Parameter, Scalar, Shape, Tensor};
