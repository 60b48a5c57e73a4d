pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod ops;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Dims, Rng, Scalar, Tensor4};
