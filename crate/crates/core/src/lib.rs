//! Fine-grained next-location prediction on relative trajectories.
//!
//! The crate is organized bottom-up:
//!
//! - [`trajkit`]: CSV ingest, planar projection, sessionizing and a synthetic
//!   mobility generator.
//! - [`abstraction`]: relative-point sequences, occupancy grids, region
//!   windows, grid labels and sample assembly.
//! - [`numcore`]: a small deterministic tensor/layer stack with hand-written
//!   backward passes, Adam, and finite-difference gradient checking.
//! - [`models`]: the fused BiLSTM+CNN predictor, its single-branch ablations,
//!   training with early stopping, and the highest-occupancy baseline.
//! - [`fedsim`]: in-process federated rounds with sample-weighted averaging and
//!   shared-pool augmentation.
//! - [`evalkit`]: splitting, metrics and reports.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod abstraction;
pub mod error;
pub mod evalkit;
pub mod fedsim;
pub mod models;
pub mod numcore;
pub mod rng;
pub mod trajkit;

pub use error::{Error, Result};
