//! Experiment configuration, seeded batch execution and summary reports.

mod config;
mod runner;
mod summary;

pub use config::{
    parse_config, ConfigError, DatasetConfig, ExperimentConfig, GraphConfig, MethodConfig,
    OracleConfig, QuadraticConfig, ScheduleConfig,
};
pub use runner::{
    build_instance, run_experiment, run_single, ExperimentOutput, HarnessError, Instance, SingleRun,
};
pub use summary::{summarize, MethodSeedEntry, MethodSummary, SummaryReport};
