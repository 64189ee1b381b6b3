pub mod attention;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pgm;
pub mod posenc;
pub mod rng;
pub mod search;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
