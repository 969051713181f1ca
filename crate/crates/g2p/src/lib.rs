//! File formats, checkpoints, run configuration and the subcommand pipeline
//! around `g2p-core`.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;

pub use config::{Method, RunConfig};
pub use error::{Error, Result};
