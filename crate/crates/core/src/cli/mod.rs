//! Command implementations behind the `dble` binary.

mod commands;
mod config;

pub use commands::*;
pub use config::{DatasetKind, ExecKind, Method, RunConfig};

use crate::error::Error;

/// Process exit status for an error: 2 for usage and configuration problems
/// (including missing input files), 1 for everything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::FileNotFound(_) => 2,
        _ => 1,
    }
}
