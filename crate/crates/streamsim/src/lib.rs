//! File formats, configuration and CLI plumbing around `streamsim-core`.

pub mod config;
pub mod io;
pub mod report;

pub use config::{load_config, ConfigError};
pub use io::{load_workload, write_generated, LoadError};
pub use report::{oracle_csv, results_csv, OracleMode, CSV_HEADER};
