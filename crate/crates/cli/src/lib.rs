//! Library side of the `glore-mtl` command: run configuration, the
//! subcommands and exit-code mapping.

pub mod commands;
pub mod config;

use glore_mtl::Error;

pub const EXIT_OK: i32 = 0;
/// Test-suite failure reported by `selftest`.
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) | Error::Shape(_) => EXIT_USAGE,
        Error::Io { .. }
        | Error::Json(_)
        | Error::Data(_)
        | Error::Png { .. }
        | Error::Checkpoint(_) => EXIT_DATA,
        Error::NonFinite { .. } | Error::Tensor(_) => EXIT_NUMERIC,
    }
}
