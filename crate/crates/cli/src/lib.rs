//! Command-line front end: CSV ingestion, fit reports, simulation grids and
//! run manifests.

pub mod commands;
pub mod grid;
pub mod io;
pub mod manifest;
pub mod nuisance;
pub mod report;

pub use commands::{run, Cli, Status};
