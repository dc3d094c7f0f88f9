//! Style-based age regression over a frozen style generator.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod editing;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod generator;
pub mod imageio;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod oracles;
pub mod training;
pub mod types;

pub use error::{Error, Result};
