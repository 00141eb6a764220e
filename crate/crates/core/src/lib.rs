pub mod backbone;
pub mod clip;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod interaction;
pub mod isfc;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod regularization;
pub mod tensor;
pub mod types;

pub use error::{Error, ErrorKind, Result};
pub use tensor::Tensor;
