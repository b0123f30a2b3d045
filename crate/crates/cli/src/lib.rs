//! Library half of the experiment runner: configuration, dataset
//! ingestion and the sweep orchestration used by the `vbnet` binary and
//! the test suites.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;

pub use config::{init_spec_from_name, load_config, parse_config_str, ExperimentConfig};
pub use data::{generate_toy, load_csv, DatasetSplit, Task};
pub use error::{CliError, Result};
pub use experiment::{build_network, run_experiment, run_single, ExperimentReport, RunResult};
