//! Synthetic data, experiment configuration and orchestration, CSV output and
//! plotting.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod plot;
pub mod synthetic;

pub use config::{load_config, parse_config, ExperimentConfig, ReferenceConfig, Scenario};
pub use dataset::{generate_dataset, PairSet, SyntheticDataset, SyntheticDatasetSpec};
pub use experiment::{
    run_experiment, run_experiment_on, run_experiment_to, ExperimentOutcome, RunRecord, RunSummary,
    CSV_COLUMNS,
};
pub use plot::{emit_plots, parse_metrics_csv, MetricsRow};
