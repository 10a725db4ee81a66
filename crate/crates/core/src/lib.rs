pub mod bench;
pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Rng, Shape, Tensor};
pub mod conditioner;
pub mod param;
pub mod layers;
pub mod flow;
pub mod checkpoint;
pub mod train;
pub mod verify;
pub mod cli;
