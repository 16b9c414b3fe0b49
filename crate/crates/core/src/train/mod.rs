//! Two-stage training: teacher fine-tuning, then student distillation.

pub mod ablate;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod stage;

pub use ablate::{AblationTable, Axis};
pub use bench::{BenchConfig, LatencyRow};
pub use checkpoint::Checkpoint;
pub use config::{Stage, StageConfig, TrainConfig};
pub use eval::{evaluate, EvalMode, EvalOutcome};
pub use metrics::{MetricsRow, MetricsWriter};
pub use model::{Batch, Model, Prepared};
pub use optim::{AdamW, AdamWConfig};
pub use stage::{model_from_checkpoint, Trainer};
