//! Command-line front end: run configuration, weight files, the
//! verification suites, the attention benchmark and feature dumps.

pub mod bench;
pub mod commands;
pub mod config;
pub mod dump;
pub mod error;
pub mod verify;
pub mod weights;

pub use error::{CliError, CliResult};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
pub struct CliChapter;
