//! Command-line driver for training, pretraining, inference, equivalence checks and profiling.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod datasets;

use std::ffi::OsString;

use clap::Parser;
use thiserror::Error;

pub use commands::{Cli, Command, CommonArgs};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("parse: {0}")]
    Parse(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Engine(#[from] sfa_core::engine::EngineError),
    #[error(transparent)]
    Mim(#[from] sfa_core::mim::MimError),
    #[error(transparent)]
    Arch(#[from] sfa_core::arch::ArchError),
    #[error(transparent)]
    Profiler(#[from] sfa_core::profiler::ProfilerError),
    #[error("{0}")]
    Failed(String),
}

/// Parses `args` (program name first) and runs the command. Returns the process exit code:
/// 0 on success, 2 on usage errors, 1 on runtime failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match commands::execute(&cli) {
        Ok(summary) => {
            print!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
