pub mod ablation;
pub mod autograd;
pub mod checkpoint;
pub mod compaction;
pub mod cost;
pub mod data;
pub mod error;
pub mod network;
pub mod nn;
pub mod optim;
pub mod salience;
pub mod shrinking;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
