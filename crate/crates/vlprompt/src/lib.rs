//! Data ingestion, configuration, checkpoints, run orchestration and
//! reporting around `vlprompt-core`.

pub mod ablate;
pub mod backbones;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod error;
pub mod report;
pub mod runner;

pub use error::{Error, Result};
