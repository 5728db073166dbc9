pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod contrast;
pub mod data;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod nn;
pub mod seed;
pub mod suppression;
pub mod trainer;

pub use error::{Error, Result};
