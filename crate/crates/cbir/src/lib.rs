//! Std companion to `cbir-core`: file formats, the benchmark harness,
//! the HTTP service and the `cbir` command line.

pub mod bench;
pub mod cli;
pub mod clock;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod formats;
pub mod report;
pub mod service;

pub use error::{Error, Result};
