pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod error;
pub mod kmeans;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pseudo_targets;
pub mod theoremlab;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
