pub mod autodiff;
pub mod cli;
pub mod blocks;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod params;
pub mod preprocess;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
