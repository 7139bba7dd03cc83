//! Persistence, datasets, configuration and the staged training pipeline
//! around `auregress-core`.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fsutil;
pub mod imageio;
pub mod models;
pub mod pipeline;
pub mod stages;

pub use error::{AppError, Result};
