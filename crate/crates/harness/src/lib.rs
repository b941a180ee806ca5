//! Experiment harness around `sscl-core`: configuration, single runs, seed
//! and hyperparameter sweeps, report files and the `sscl` command line.

// Validation is written as `!(x > 0.0)` on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analyze;
pub mod cli;
pub mod config;
pub mod error;
pub mod report;
pub mod run;
pub mod svg;
pub mod sweep;

pub use config::{ExperimentConfig, Method, SweepAxis};
pub use error::{HarnessError, Result};
pub use run::{run_experiment, RunRecord, StepKind, StepTrace};
pub use sweep::{run_seeds, run_sweep, SweepReport};
