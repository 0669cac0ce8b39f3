//! Command-line front end: config parsing, run orchestration and output files.

pub mod config;
pub mod run;

pub use config::{parse_config, to_toml, ConfigError, Mode, RunConfig};
pub use run::{config_hash, execute, load_config, CliError, Report};
