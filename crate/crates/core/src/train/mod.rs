//! Triplet-loss training of the affine embedding head.
//!
//! The head sits between two l2-normalizations: pooled features are
//! normalized, projected by `W x + b`, then normalized again. Training
//! minimizes the margin hinge over `(query, positive, negative)` triplets
//! with Adam.

mod adam;
mod loss;
mod mining;
mod trainer;

pub use adam::{adam_step, AdamState};
pub use loss::{
    hinge_argument, is_active, loss_and_grad, triplet_loss, Gradient, MAX_MARGIN, MIN_MARGIN,
};
pub use mining::{batch_hard_mine, sample_triplets, Triplet};
pub use trainer::{
    batch_loss_and_grad, init_head, train_head, EpochLog, Mining, TrainConfig, TrainingSample,
};
