//! Meta-training, evaluation, checkpoints, metrics and analysis.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod learners;
pub mod metrics;
pub mod sweep;
pub mod train;

pub use analysis::{update_direction_analysis, DirectionTag, UpdateDirection, UpdateReport};
pub use checkpoint::Checkpoint;
pub use config::{LearnerKind, RunConfig, TaskSourceKind};
pub use learners::{build_learner, fixed_tasks, task_sources, AnyLearner, TaskSource, TaskSources};
pub use metrics::{mean_ci, MetricRow, MetricsLog, Stat};
pub use sweep::{sweep, Grid, SweepRun};
pub use train::{evaluate, load_learner, loss_metric, meta_train, TrainOptions, TrainOutcome};
