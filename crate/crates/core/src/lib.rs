//! Self-supervised 3-D pre-training by forecasting LiDAR returns.
//!
//! The pipeline encodes the current point cloud into a dense feature grid,
//! rolls that grid forward in time conditioned on ego actions, decodes a
//! time-conditioned signed distance field from it, and renders LiDAR ranges
//! differentiably so the whole stack can be trained against observed scans.

pub mod cli;
pub mod config;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod field;
pub mod gradsuite;
pub mod lidarsim;
pub mod renderer;
pub mod trainer;

pub use error::{Error, Result};
