//! Experiment harness: config, run directories, metrics logging, baselines
//! and the experiment suites behind the `mtm` binary.

pub mod baseline;
pub mod commands;
pub mod config;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod report;
pub mod stats;

pub use error::{HarnessError, Result};
