//! Experiment harness for the few-shot video detection lab: config loading,
//! archive orchestration and result reports.

pub mod config;
pub mod harness;
pub mod report;

pub use config::{CorpusSource, ExperimentConfig};
pub use harness::{run_experiment, CellKey, CellResult, RunOptions};
pub use report::{emit_report, ReportFormat, ResultsTable};
