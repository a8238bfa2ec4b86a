pub mod array;
pub mod engine;
pub mod codec;
pub mod confidence;
pub mod error;
pub mod harness;
pub mod heads;
pub mod network;
pub mod pipeline;
pub mod synth;

pub use array::{DenseArray, Scalar};
pub use error::{Error, Result};
