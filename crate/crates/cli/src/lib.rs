//! Experiment runner for `fmdlab-core`: TOML configs, analytic expressions,
//! staged execution and run manifests.

pub mod config;
pub mod expr;
pub mod run;

pub use config::ExperimentConfig;
pub use run::{execute, Command, RunManifest};
