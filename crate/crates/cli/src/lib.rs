//! Command implementations behind the `linkpat` binary.

pub mod commands;
pub mod config;
pub mod render;

pub use commands::{cmd_baseline, cmd_eval, cmd_explain, cmd_train, QuerySpec, SplitChoice};
pub use config::RunConfig;
