//! File formats, training loops, evaluation and the benchmark behind the
//! `viewformer` command-line tool. The numerical work lives in
//! `viewformer-core`.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod pipeline;
pub mod report;
pub mod train;

pub use error::{Error, Result};
