//! File formats, run directories and reports around `ccvnet-core`.

pub mod error;
pub mod manifest;
pub mod report;
pub mod run;
pub mod trialfile;

pub use error::{AppError, Result};
