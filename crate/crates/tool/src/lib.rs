//! File formats, checkpoints, oracles and the command-line driver built on
//! `sr-distill-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod files;
pub mod gradcheck;
pub mod logs;
pub mod manifest;
pub mod pngio;
pub mod report;

pub use error::{Result, ToolError};
