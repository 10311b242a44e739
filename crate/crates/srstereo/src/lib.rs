//! File formats, run configuration, checkpoints and the command-line
//! driver around `srstereo-core`.

pub mod checkpoint;
pub mod colormap;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod report;

pub use error::{AppError, AppResult};
