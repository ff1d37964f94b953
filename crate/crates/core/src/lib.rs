//! Active-learning dataset distillation for LiDAR range-image segmentation.
//!
//! Point clouds are projected onto range images, a Monte-Carlo dropout model
//! scores the unlabeled pool with Bayesian uncertainty heuristics, and the
//! acquisition loop grows the labeled set one budget at a time while logging
//! test mIoU and stability diagnostics.

pub mod al_loop;
pub mod augmentation;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod metrics;
pub mod projection;
pub mod rng;
pub mod scorer;
pub mod synth;
pub mod uncertainty;

pub use error::{Error, Result};
