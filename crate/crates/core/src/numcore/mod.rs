//! Deterministic tensor and layer stack.
//!
//! Every layer is a pair of free functions: a forward pass that returns its
//! output plus whatever the backward pass needs, and a backward pass that maps
//! the upstream gradient to gradients w.r.t. inputs and parameters. Batch
//! work is split into fixed-size chunks and partial sums are reduced in chunk
//! order, so results do not depend on the rayon thread count.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod lstm;
mod par;
pub mod params;
pub mod tensor;

pub use adam::AdamState;
pub use params::{Param, ParamSet};
pub use tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
