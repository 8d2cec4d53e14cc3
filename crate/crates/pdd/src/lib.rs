//! IO, file formats, orchestration and the CLI around `pdd-core`.

pub mod ablate;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evalrun;
pub mod pgm;
pub mod train;
