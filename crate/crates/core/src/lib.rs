pub mod discriminator;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod io;
pub mod nn;
pub mod metrics;
pub mod objectives;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{no_grad, Scalar, Tensor};
