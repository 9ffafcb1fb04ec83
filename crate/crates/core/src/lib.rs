//! unshift: source-free adaptation of a frozen image classifier.
//!
//! Given only unlabeled target images and a trained classifier, a small
//! transformation network learns per-image backward transforms (rotation,
//! brightness, contrast) that maximize the classifier's temperature-scaled
//! maximum softmax probability, undoing a distribution shift along those
//! axes. The crate also ships the shift generator, oracle/fine-tuning
//! baselines, and the sweep harness used to evaluate the method.

pub mod adapt;
pub mod baselines;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod error;
pub mod experiments;
pub mod image;
pub mod models;
pub mod nn;
pub mod plots;
pub mod reference;
pub mod seeds;
pub mod shiftgen;
pub mod transforms;

pub use error::{Error, Result};
pub use image::ImageTensor;

/// CLI entry point; returns the process exit code.
pub fn run_cli() -> i32 {
    cli::run(std::env::args_os())
}
