//! Experiment runner for the `nets` sampler: config handling and the train, sample and
//! benchmark pipelines behind the `nets` binary.

pub mod config;
pub mod run;
pub mod targets;

pub use config::ExperimentConfig;
pub use run::{evaluate, run_benchmark, run_sample, run_train, suite_config, SampleOverrides};
