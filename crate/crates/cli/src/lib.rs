//! Config-driven experiment runner built on `fedrobust`.

pub mod config;
pub mod runner;

pub use config::{load_config, parse_config, Cell, ConfigError, ExperimentConfig};
pub use runner::{run_all, run_cell, CellOutput, RunError};
