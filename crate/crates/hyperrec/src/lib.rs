//! IO, file formats and the command-line pipeline around `hyperrec-core`.

pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod report;
pub mod tsv;

pub use config::RunConfig;
pub use error::{Error, Result};
