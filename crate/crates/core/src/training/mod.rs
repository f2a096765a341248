//! Optimizers, metrics, few-shot sampling and the training loop.

pub mod metrics;
pub mod optim;
pub mod sampling;
pub mod trainer;

pub use metrics::{compute_metrics, MetricsReport};
pub use optim::{GroupOptimizer, GroupSettings, OptimizerKind};
pub use sampling::few_shot_sample;
pub use trainer::{accumulate_gradients, evaluate, evaluate_prepared, train, EpochRecord, PerGroup, TrainConfig, TrainOutcome};
