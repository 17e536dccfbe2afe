//! File formats, dataset loading and the `dlf` command line for dynamic
//! linear flow models built with `dlf-core`.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod idx;
pub mod image;
pub mod log;
pub mod suites;
pub mod tensor_file;

pub use error::{Error, Result};
