//! Staged training: AdamW with clipping, warmup schedules, freeze discipline,
//! resumable checkpoints.

mod config;
mod optim;
#[cfg(test)]
mod tests;
mod trainer;

pub use config::{lr_at, Schedule, StageConfig};
pub use optim::{adamw_step, clip_scale, AdamW, OptimizerState, StepStats};
pub use trainer::{
    pretrain_understanding, stage_world, HeldOut, MetricsLog, PretrainConfig, StepLog, TrainMode, Trainer,
    HELD_OUT_STREAM, METRICS_HEADER,
};
