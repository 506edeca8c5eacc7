//! File formats and IO around `text2tree-core`: code trees, JSONL datasets,
//! vocabularies, checkpoints, config files, reports and matrix exports.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod export;
pub mod report;
pub mod tree_io;

pub use error::{FormatError, Result};
