//! Toolkit for studying norm-budgeted targeted attacks on a small
//! convolutional image classifier, and how much of the damage simple
//! smoothing filters undo.
//!
//! The pieces fit together like this:
//!
//! * [`classifier`] — a from-scratch CNN (conv / relu / maxpool / dense /
//!   softmax) with forward, cross-entropy loss, input gradients, and
//!   minibatch SGD training.
//! * [`attack`] — iterative targeted perturbation search constrained to an
//!   L1, L2, or L-infinity ball of radius `beta` around the clean image.
//! * [`filters`] — Gaussian blur and median filtering used as input-side
//!   defenses.
//! * [`harness`] — batch experiment runner producing per-image records and
//!   aggregate tables as CSV.
//! * [`image`] / [`dataset`] — PPM/PGM image I/O, IDX dataset loading, and a
//!   deterministic synthetic shape dataset for self-contained runs.
//!
//! Everything is deterministic given the seeds passed in: all randomness
//! flows through [`rng::SplitMix64`] and all numeric kernels are plain
//! sequential f64 loops.

pub mod attack;
pub mod classifier;
pub mod dataset;
pub mod error;
pub mod filters;
pub mod harness;
pub mod image;
pub mod norms;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
