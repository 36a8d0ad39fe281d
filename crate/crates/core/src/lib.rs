//! Class-incremental learning with per-task adapters on a small vision transformer.

pub mod alignment;
pub mod analysis;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod pretrain;
pub mod seeds;
pub mod suite;
pub mod svd;
pub mod tape;
pub mod tensor;
pub mod tsai;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::Tensor;
