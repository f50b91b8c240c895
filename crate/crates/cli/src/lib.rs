//! Library half of the CLI: the experiment runner and report emitters,
//! kept separate from argument parsing so tests can drive full runs
//! in-process.

pub mod report;
pub mod runner;

pub use report::{emit_reports, RunReport, TrialReport};
pub use runner::{build_oracle, offline_sample, run_experiment};
