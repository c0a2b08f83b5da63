pub mod codec;
pub mod config;
pub mod das;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod simulate;
pub mod store;
pub mod tensor;
pub mod training;
pub mod vq;

pub use error::{Error, Result};
pub use tensor::Tensor;
