//! Experiment harness around `mjp-core`: dataset generation, flat-file run
//! configs, training/evaluation loops, binary checkpoints, JSON-lines
//! reports, and image/tensor export. The `mjp` binary wires these into the
//! `gen-data`, `train`, `eval`, `attack`, `analyze` and `shuffle-demo`
//! subcommands.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod ppm;
pub mod report;
pub mod train;

pub use config::{DalChoice, EvalMode, RunConfig};
pub use dataset::{Dataset, DatasetKind};
pub use error::{CliError, Result};
