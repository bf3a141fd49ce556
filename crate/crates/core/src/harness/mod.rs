//! Synthetic tasks, run configuration, the training loop and benchmarks.

pub mod bench;
pub mod config;
pub mod gradcheck;
pub mod record;
pub mod tasks;
pub mod train;

pub use config::{RetentionConfig, RunConfig, ScheduleKind, TaskConfig, TrainConfig};
pub use gradcheck::{gradcheck, GradcheckMode, GradcheckReport};
pub use record::{EpochMetrics, RunRecord, RunStatus, RECORD_SCHEMA};
pub use tasks::{gen_task, Example, TaskKind, TaskSpec};
pub use train::{evaluate, resolve_schedule, to_batch, train, EvalMetrics, TrainOptions, TrainOutcome};
