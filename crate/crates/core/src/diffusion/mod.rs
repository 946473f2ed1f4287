//! Noise schedule, forward process, correlated noise prior, the memory-rollout
//! training objective and the optimizer.

pub mod noise;
pub mod optim;
pub mod schedule;
pub mod train;

pub use noise::{sample_correlated_noise, sample_segment_index, segment_index_probs};
pub use optim::{AdamW, AdamWConfig, CosineSchedule};
pub use schedule::{make_schedule, DiffusionSchedule, ScheduleConfig};
pub use train::{
    example_loss, rollout_memory, rollout_memory_var, training_step, write_metrics_csv, Example,
    GradPath, MemoryMode, StepMetrics, TrainConfig, Trainer,
};
