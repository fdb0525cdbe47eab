//! Library half of the `lse-icnn` binary, kept separate so the commands can
//! be driven from tests.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod commands;

pub use commands::{run, Cli, CliError};
