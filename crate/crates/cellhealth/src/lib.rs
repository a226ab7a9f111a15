//! File formats and the command-line pipeline built on `cellhealth-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod ingest;
pub mod manifest;
pub mod svg;
