pub mod dataset;
pub mod error;
pub mod exec;
pub mod harness;
pub mod hpe;
pub mod mechanism;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod stats;
pub mod transfer;

pub use error::{Error, Result};
