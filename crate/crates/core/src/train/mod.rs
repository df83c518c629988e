//! Optimizers, checkpoints, stage-wise training and evaluation.
//!
//! A stage trains one network of a cascade (or, for the joint variant, all
//! of them) while everything else stays frozen. Segmentation stages use
//! momentum SGD on cross-entropy, denoising stages use Adam on MSE against
//! the clean image. Noise is redrawn every epoch from a seed derived from
//! `(noise seed, epoch, sample index)`. The parameters with the lowest
//! validation loss, including the starting point, are kept.

mod checkpoint;
mod eval;
mod optim;
mod progressive;
mod stage;

pub use checkpoint::{Checkpoint, StageId, StageKind, MAGIC, VERSION};
pub use eval::{evaluate, EvalOptions, EvalReport};
pub use optim::{adam_step, sgd_step, OptimizerConfig, OptimizerState};
pub use progressive::{
    build_architecture, checkpoint_path, holdout, load_bootstrap, load_trained, train_joint_variant,
    train_progressive, RunOptions, TrainRun, TrainSettings, TrainVariant,
};
pub use stage::{
    frozen_digest, make_batch, params_of, params_of_mut, train_stage, validation_loss, Batch, EpochLog, LrSchedule,
    Objective, StageOutcome, StageSchedule, StageTask, Target, TrainData,
};
