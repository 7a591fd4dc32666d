//! Optimizers, schedules, the two-phase regression curriculum, metric
//! logging, evaluation and resumable training loops.

mod eval;
mod log;
mod optim;
mod trainer;

pub use eval::{evaluate, evaluate_with, EvalMode};
pub use log::{EvalRecord, MetricLog, Metrics, StepRecord, CSV_HEADER};
pub use optim::{Optimizer, OptimizerKind, Schedule};
pub use trainer::{Stage, TrainPlan, Trainer};
