pub mod attention;
pub mod diffusion;
pub mod error;
pub mod flops;
pub mod redundancy;
pub mod rng;
pub mod scheduler;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
