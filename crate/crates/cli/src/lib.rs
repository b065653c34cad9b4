//! The `flexdiff` command-line driver.

pub mod analysis;
pub mod commands;
pub mod config;
pub mod manifest;
pub mod pipeline;

use flexdiff_core::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Parameter(_)
        | Error::Consistency(_)
        | Error::Context(_)
        | Error::Domain(_)
        | Error::Ordering { .. } => EXIT_USAGE,
        Error::Instability { .. } | Error::Iteration { .. } => EXIT_DIVERGENCE,
        Error::Rollout { source, .. } => exit_code(source),
        _ => EXIT_DATA,
    }
}
