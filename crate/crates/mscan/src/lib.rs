//! Study IO, synthetic data, staged training and the command-line front-end
//! for multi-view lumbar spinal canal stenosis grading. The algorithms live
//! in `mscan-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod plot;
pub mod studyio;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
