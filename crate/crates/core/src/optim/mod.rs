//! AdamW, the epoch loop with early stopping, and per-region orchestration.

mod adamw;
mod regional;
mod train;

pub use adamw::{AdamW, AdamWConfig};
pub use regional::{job_seed, region_hash, train_job, train_regional, JobOutcome, JobScope, RegionalReport, RegionalResult};
pub use train::{
    batch_loss, epoch_seed, evaluate_loss, fit, train_epoch, write_history, EarlyStopping, EpochRecord, EpochStats,
    FitResult, StopDecision, TrainConfig,
};
