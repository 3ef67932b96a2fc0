//! Library surface of the experiment driver: configuration parsing, CSV
//! schemas, and the pipelines behind each subcommand.

pub mod config;
pub mod experiment;
pub mod io;
