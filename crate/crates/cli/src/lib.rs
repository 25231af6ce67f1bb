//! Command-line pipeline and labeling service over `likenet-core`.

pub mod args;
pub mod commands;
pub mod config;
pub mod service;

use std::ffi::OsString;

use clap::Parser;

pub use commands::{run, Failure};

/// Parses `argv`, runs the command and returns the process exit code.
///
/// Usage errors exit with 2, pipeline errors with 1.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match args::Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{f}");
            f.exit_code()
        }
    }
}
