//! The fused sequence + occupancy predictor, its single-branch ablations, the
//! training loop with early stopping, and the historic-occupancy baseline.

mod arch;
mod ho;
mod network;
mod train;

pub use arch::{ArchConfig, TrainConfig, Variant};
pub use ho::{ho_predict, max_cells};
pub use network::{Batch, DropoutMasks, ForwardCache, ForwardCtx, Gradients, Model, ModelLossTarget, NormMode};
pub use train::{
    evaluate_loss_acc, fit, predict_cell, predict_probs, train_epoch, train_epoch_capped, EarlyStopping, EpochOutcome,
    EpochRecord, History, Verdict,
};
