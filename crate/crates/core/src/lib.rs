//! Core algorithms for multi-view lumbar spinal canal stenosis grading.
//!
//! Everything here is pure computation over in-memory buffers: patient-space
//! geometry, image conditioning, a small reverse-mode autodiff engine and the
//! models built on it, the weighted loss, and evaluation metrics. File formats,
//! the synthetic data generator and the CLI live in the `mscan` crate.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod encoder;
pub mod error;
pub mod geometry;
pub mod image;
pub mod level;
pub mod localization;
mod math;
pub mod metrics;
pub mod multiview;
pub mod nn;
pub mod preprocess;
pub mod sliceselect;
pub mod train;

pub use error::{CoreError, Result};
pub use image::{FloatImage2D, Image2D};
pub use level::{Grade, Level, NUM_CLASSES, NUM_LEVELS};
