pub mod error;
pub mod imaging;
pub mod losses;
pub mod model;
pub mod nn;
pub mod pac;
pub mod patch;
pub mod pyramid;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
