//! Optimizer, checkpoints and the training / evaluation / prediction drivers.

mod adam;
mod checkpoint;
mod config;
mod run;

pub use adam::{adam_step, adam_update, lr_schedule, AdamState};
pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use config::{Preset, TrainConfig};
pub use run::{
    dataset_loss, evaluate, mean_loss, planned_steps, predict_image, prepare, sample_loss, score,
    train, Evaluation, StepLog, FINAL_CHECKPOINT, LOSS_LOG, PREDICTION_FILES,
};
