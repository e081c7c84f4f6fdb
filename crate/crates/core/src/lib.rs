pub mod archive;
pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod config;
pub mod downscale;
pub mod error;
pub mod grid;
pub mod ingest;
pub mod metrics;
pub mod nn;
pub mod synthetic;

pub use error::{Error, Result};
