//! Front end of the `rpusim` binary: experiment configs, presets and the
//! `run`, `inspect`, `compare` and `sweep` commands.

pub mod compare;
pub mod config;
pub mod error;
pub mod inspect;
pub mod run;
pub mod sweep;

pub use config::{DatasetSpec, ExperimentConfig, Overrides, TrainSection, PRESETS};
pub use error::CliError;
