//! Library side of the `mfabo` command: configuration, result files and summaries.

pub mod config;
pub mod results;
pub mod summarize;
