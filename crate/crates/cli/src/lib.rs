//! Batch front end for `ctdl-core`: configuration, file formats and the
//! `ctdl` subcommands.

pub mod commands;
pub mod config;

pub use config::ExperimentConfig;

use ctdl_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}
