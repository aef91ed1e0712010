//! Experiment runner: configuration loading, the scenario sweep, report and
//! file emission, and attention-score export. The `fedbag` binary is a thin
//! argument parser over this library.

pub mod attention;
pub mod config;
pub mod experiment;
pub mod report;

pub use attention::export_attention;
pub use config::{validate_config, ConfigError, DatasetSource, ExperimentConfig, Scenario};
pub use experiment::{evaluate_test_set, run_experiment};
pub use report::{RunRecord, RunReport, TestReport};
