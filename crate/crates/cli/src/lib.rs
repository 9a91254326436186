//! Command-line front end: run configuration, checkpoints, image files and
//! the `train` / `finetune` / `sample` / `inpaint` / `eval` / `grid`
//! commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod images;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::{CliError, CliResult};
