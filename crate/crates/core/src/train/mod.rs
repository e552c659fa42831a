//! Loss, optimizers, the schedule-driven training loop, the large-minibatch
//! equivalence harness and per-shape timing.

mod bench;
mod equivalence;
mod loss;
mod optim;
mod run;

use thiserror::Error;

use crate::data::DataError;
use crate::metrics::MetricError;
use crate::model::ModelError;
use crate::schedule::ScheduleError;
use crate::tensor::TensorError;

pub use bench::{bench_shapes, measured_speedup, schedule_speedup, ShapeTiming, SpeedupReport, MIN_BENCH_REPS};
pub use equivalence::{
    equivalence_drift, equivalence_frozen, equivalence_report, fit_drift_order, toy_problem, DriftPoint,
    EquivalenceReport, Example, FrozenCheck, LeastSquares, Objective, RvsrObjective, ToyMlp, DRIFT_ORDER_RANGE,
    FROZEN_TOLERANCE,
};
pub use loss::{charbonnier_part, loss_charbonnier, CHARBONNIER_EPS2};
pub use optim::{sgd_step, OptimState, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, MOMENTUM};
pub use run::{
    evaluate_clips, evaluate_params, gradient_step, train_run, EvalRow, IterationRow, RunRecord, TrainOutcome,
    TrainSpec, RECORDS_CSV_HEADER,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape: {0}")]
    Shape(String),
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite loss or weights at iteration {iteration}")]
    Diverged { iteration: u64, record: Box<RunRecord> },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;
