pub mod check;
pub mod error;
pub mod experiment;
pub mod layers;
pub mod net;
pub mod optim;
pub mod rng;
pub mod shapegen;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
