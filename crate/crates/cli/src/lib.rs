//! Experiment harness for the LLQR+SAM laboratory: TOML configs, the
//! experiment registry, deterministic CSV/JSON artifacts and the
//! verification suite.

pub mod checks;
pub mod config;
pub mod experiments;
pub mod output;

pub use checks::{run_check, run_checks, CheckContext, CheckResult};
pub use config::{ConfigError, ExperimentConfig, ExperimentTag};
pub use experiments::{run_experiment, Predictors, RunError};
pub use output::ArtifactSet;
