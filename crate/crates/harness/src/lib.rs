//! Experiment harness: configuration, corpus ingestion, resumable runs,
//! result records and reports.

pub mod config;
pub mod corpus;
pub mod error;
pub mod plot;
pub mod records;
pub mod report;
pub mod runner;

pub use crate::config::ExperimentConfig;
pub use crate::error::{HarnessError, Result};
pub use crate::records::ResultRecord;
pub use crate::runner::{run_experiment, run_experiment_with_progress};
