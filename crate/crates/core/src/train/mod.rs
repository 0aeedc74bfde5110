//! Losses, optimizer, training and evaluation loops, gradient checks and
//! checkpoints.

mod checkpoint;
mod engine;
mod eval;
mod gradcheck;
mod loss;
mod optim;

pub use checkpoint::{
    checkpoint_string, config_hash, load_checkpoint, load_checkpoint_for, read_checkpoint, save_checkpoint,
    FORMAT_VERSION,
};
pub use engine::{
    epoch_order, prepare_dataset, train_loop, train_step, EpochMetrics, PreparedScene, StepLoss, TrainConfig,
    TrainState,
};
pub use eval::{evaluate, EvalOptions, EvalReport, Perturbation};
pub use gradcheck::{grad_check, grad_check_with, BlockCheck, BlockStatus, GradCheckReport};
pub use loss::{predict_classes, seg_loss, total_loss};
pub use optim::{adam_step, Moment, OptimizerState};
