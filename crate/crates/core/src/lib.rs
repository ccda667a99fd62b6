pub mod bench;
pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod dct;
pub mod error;
pub mod features;
pub mod model;
pub mod moe;
pub mod nn;
pub mod objective;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
