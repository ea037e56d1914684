//! File formats, subcommands and previews behind the `layoutpnp` binary.

pub mod commands;
pub mod dmap;
pub mod error;
pub mod export;
pub mod files;

pub use error::{CliError, Result};
