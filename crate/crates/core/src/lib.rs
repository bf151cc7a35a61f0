pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod dsp;
pub mod encoder;
pub mod model;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod ssl;
pub mod train;
pub mod wav;

pub use error::{Error, Result};
