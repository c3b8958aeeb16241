pub mod distortion;
pub mod engine;
pub mod error;
pub mod imaging;
pub mod losses;
pub mod models;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
