pub mod augment;
pub mod checkpoint;
pub mod checks;
pub mod cli;
pub mod data;
pub mod autograd;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
