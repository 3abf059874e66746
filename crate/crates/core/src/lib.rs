pub mod autodiff;
pub mod data;
pub mod eval;
mod error;
pub mod harness;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
