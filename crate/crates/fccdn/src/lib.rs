//! File-facing side of the FCCDN change-detection stack: PNG datasets and
//! manifests, checkpoint archives, run directories, and the `fccdn`
//! command-line tool. The numerics live in `fccdn-core`.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod png_io;
pub mod runlog;

pub use error::{Error, Result};
