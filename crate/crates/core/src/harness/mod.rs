//! Experiment plumbing: run configuration, synthetic probes, checkpoints,
//! metrics, frame grids and the ablation runner.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod experiment;
pub mod metrics;
pub mod ppm;

pub use checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta};
pub use config::{AblationMode, EvalConfig, MemoryKind, RunConfig};
pub use data::{DatasetSpec, DriftProbeSpec, ProbeKind, RecallProbeSpec, Toy1dSpec};
pub use experiment::{prepare_data, run_ablation, train_model, AblationReport, ErrorCurve, PreparedData};
pub use metrics::{mse, psnr, MetricsRecord};
