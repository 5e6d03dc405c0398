//! Multi-task adversarial sequence-policy learning with a shared lifelong basis.

pub mod checkpoint;
pub mod config;
pub mod discriminator;
pub mod env;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod memory;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
