//! Command-line harness: configuration, training runs, evaluation reports and
//! parameter accounting.

pub mod cli;
pub mod config;
pub mod run;

pub use cli::{execute, Cli};
pub use config::RunConfig;
