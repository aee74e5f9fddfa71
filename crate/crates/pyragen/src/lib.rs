//! File formats, training drivers, the CLI and the HTTP service around
//! `pyragen-core`.

pub mod archive;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod imageio;
pub mod report;
pub mod service;
pub mod training;
pub mod wire;

pub use error::{Error, Result};
