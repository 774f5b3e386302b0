//! Configuration-driven experiments on top of the `alis` library: reduced
//! dimension sweeps, optimizer comparisons and emulator runs, written as CSV.
//!
//! All randomness derives from the configuration seed. Each job (sample
//! group, replicate) and each scored (point, method, replicate) triple owns
//! a numbered stream, so results do not depend on the thread count.

pub mod app;
pub mod ces;
pub mod compare;
pub mod config;
pub mod experiment;
pub mod instance;
pub mod plots_data;
pub mod reference;

pub use compare::{compare_optimizers, CompareRow};
pub use config::{CesRunConfig, CompareConfig, ExperimentConfig, Metric, ProblemSpec, SampleSource, Sweep};
pub use plots_data::{parse_sweep_csv, SweepTable};
pub use experiment::{lower_median, run_experiment, ExperimentReport, RunEnv};
