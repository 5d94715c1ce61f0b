pub mod backbone;
pub mod config;
pub mod container;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod infer;
pub mod kernelgen;
pub mod metrics;
pub mod nn;
pub mod plfe;
pub mod training;

pub use error::{Error, Result};
