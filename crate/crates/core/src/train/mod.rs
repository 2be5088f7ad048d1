//! Optimization: Adam, schedules, losses, training loops, checkpoint averaging
//! and back-translation.

mod average;
mod backtranslate;
mod loss;
mod mlm;
mod optim;
mod trainer;

pub use average::{average, average_checkpoints};
pub use backtranslate::{backtranslate, Backtranslation};
pub use loss::label_smoothed_loss;
pub use mlm::{mask_tokens, mlm_loss, MaskPolicy, MaskedBatch};
pub use optim::{adam_step, lr_at_step, AdamConfig, LrSchedule, OptimizerState};
pub use trainer::{
    pretrain_mlm, train_translation, translation_loss, RunOutput, StepRecord, TrainConfig, Trainer,
};
