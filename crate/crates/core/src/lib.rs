pub mod analysis;
pub mod benchmark;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod graph;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
