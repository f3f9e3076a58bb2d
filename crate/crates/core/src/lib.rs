//! Certified few-shot adaptation with a finite hypothesis set.
//!
//! The pipeline trains a zoo of small per-task adapters, fits a denoising
//! diffusion model over the flattened adapter vectors, and adapts to a new
//! few-shot task by drawing a fixed set of candidate adapters and picking
//! the one with the lowest support loss. Because the candidate set is finite
//! and fixed before any downstream data is seen, the selected adapter comes
//! with a PAC-Bayes risk certificate whose complexity grows only with the
//! log of the set size.
//!
//! Modules, bottom-up:
//!
//! - [`numerics`]: matrices, MLPs with hand-written backprop, Adam/LAMB,
//!   k-means and silhouette scores.
//! - [`taskgen`]: a synthetic family of rotated k-way classification tasks
//!   behind a frozen random-feature backbone, plus episode sampling.
//! - [`zoo`]: linear-head adapters, per-task training and the `.stzo` file
//!   format.
//! - [`diffusion`]: noise schedule, time-conditioned MLP denoiser, training
//!   with EMA and ancestral sampling, `.stdf` checkpoints.
//! - [`select`]: hypothesis sets and exhaustive / hierarchical
//!   evaluate-then-select.
//! - [`bounds`]: finite-hypothesis, quantization and Gaussian PAC-Bayes
//!   certificates and the bounded losses they need.
//! - [`harness`]: end-to-end benchmarks, aggregation and reports.

pub mod bounds;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod seed;
pub mod select;
pub mod taskgen;
pub mod zoo;

pub use error::{Error, Result};
