//! Declarative experiments: configuration, ground-truth registry and the
//! commands behind the command-line tool.

mod commands;
mod config;

pub use commands::*;
pub use config::*;
