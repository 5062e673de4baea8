pub mod autograd;
pub mod backbone;
pub mod cac;
pub mod data;
pub mod dac;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub mod cli;
