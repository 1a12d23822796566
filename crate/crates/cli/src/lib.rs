//! Ingestion, configuration, experiment running and report serialization
//! for the `bchmm` command-line tool.

pub mod config;
pub mod error;
pub mod experiment;
pub mod ingest;
pub mod manifest;
pub mod report;

pub use error::{CliError, Result};
