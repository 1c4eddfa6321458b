pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod kernel;
pub mod model;
pub mod optim;
pub mod params;
pub mod pde;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod train;
pub mod vae;

pub use error::{Error, Result};
