//! File formats and command line for `vrga-core`.
//!
//! Dumps and checkpoints are a JSON manifest plus a raw little-endian
//! payload ([`container`]); plans are plain JSON ([`plan`]). Every artifact
//! written by the command line carries a [`manifest::RunManifest`].

pub mod cli;
pub mod container;
pub mod error;
pub mod fsutil;
pub mod manifest;
pub mod plan;
pub mod report;

pub use error::{AppError, AppResult};
