//! Experiment driver: configuration, training data, sweeps and file output.

pub mod config;
pub mod diagnostics;
pub mod experiment;
pub mod export;
pub mod training;

pub use config::{load_config, ExperimentConfig, EXPERIMENTS};
pub use experiment::{build_model, error_metrics, run_experiment, ReportRow, RowResult, RunReport};
pub use export::write_report;
pub use training::{build_training_set, TrainingPreset};
