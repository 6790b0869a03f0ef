//! Experiment runner for the toy LEDITS library: training, inversion,
//! editing, parameter sweeps and noise-map statistics, each driven by a JSON
//! run config.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{cmd_edit, cmd_invert, cmd_stats, cmd_sweep, cmd_train, Overrides};
pub use config::RunConfig;
pub use error::{CliError, Result};
