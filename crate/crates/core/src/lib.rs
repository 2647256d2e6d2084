pub mod autodiff;
pub mod data;
pub mod error;
pub mod exec;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub mod model;
pub mod confidence;
pub mod proto;
pub mod metrics;
pub mod eval;
pub mod train;
pub mod cli;
