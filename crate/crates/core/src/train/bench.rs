use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::model::{TinyRvsrParams, SCALE};
use crate::schedule::{MinibatchShape, MultigridSchedule};
use crate::tensor::{Real, Tensor, Workers};

use super::optim::{OptimState, OptimizerKind};
use super::run::{gradient_step, RunRecord};
use super::{Result, TrainError};

pub const MIN_BENCH_REPS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeTiming {
    pub shape: MinibatchShape,
    /// Mean wall time of one training iteration (gradient plus optimizer
    /// step), warmup repetitions excluded.
    pub mean_ms: f64,
    pub reps: usize,
    pub workers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub baseline_ms: f64,
    pub multigrid_ms: f64,
    /// Predicted baseline time over predicted multigrid time.
    pub predicted: f64,
    /// Measured end-to-end ratio, when both runs were executed.
    pub measured: Option<f64>,
}

fn synthetic_samples<S: Real>(shape: &MinibatchShape, seed: u64) -> Result<Vec<Batch<S>>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (t, h, w) = (shape.temporal, shape.spatial.height, shape.spatial.width);
    (0..shape.batch)
        .map(|_| {
            let lr = Tensor::from_fn(&[t, 1, 3, h, w], |_| S::of(rng.gen::<f64>()));
            let hr = Tensor::from_fn(&[t, 1, 3, h * SCALE, w * SCALE], |_| S::of(rng.gen::<f64>()));
            Ok(Batch { lr, hr, crops: Vec::new() })
        })
        .collect()
}

/// Mean iteration time per shape. Inputs are synthesised before timing; the
/// first `warmup` repetitions of each shape are discarded.
pub fn bench_shapes<S: Real>(
    params: &TinyRvsrParams<S>,
    shapes: &[MinibatchShape],
    reps: usize,
    warmup: usize,
    workers: usize,
) -> Result<Vec<ShapeTiming>> {
    if reps < MIN_BENCH_REPS {
        return Err(TrainError::Config(format!("need at least {MIN_BENCH_REPS} repetitions, got {reps}")));
    }
    let pool = Workers::new(workers);
    shapes
        .iter()
        .enumerate()
        .map(|(i, shape)| {
            let samples = synthetic_samples::<S>(shape, i as u64)?;
            let mut scratch = params.clone();
            let mut opt = OptimState::<S>::new(OptimizerKind::Adam, scratch.param_count());
            let mut total = 0.0;
            for rep in 0..warmup + reps {
                let start = Instant::now();
                let (_, grads) = gradient_step(&scratch, &samples, &pool)?;
                let mut flat = scratch.flatten();
                // zero lr keeps the weights, and so the work, identical across reps
                opt.step(&mut flat, &grads.flatten(), 0.0)?;
                scratch.assign_flat(&flat)?;
                let ms = start.elapsed().as_secs_f64() * 1e3;
                if rep >= warmup {
                    total += ms;
                }
            }
            Ok(ShapeTiming {
                shape: *shape,
                mean_ms: total / reps as f64,
                reps,
                workers: pool.count(),
            })
        })
        .collect()
}

fn predicted_ms(sched: &MultigridSchedule, timings: &[ShapeTiming]) -> Result<f64> {
    sched
        .stages()
        .iter()
        .map(|stage| {
            let shape = stage.shape();
            timings
                .iter()
                .find(|t| t.shape == shape)
                .map(|t| t.mean_ms * stage.iterations as f64)
                .ok_or_else(|| TrainError::Config(format!("no timing for shape {shape}")))
        })
        .sum()
}

/// Predicted speedup from per-shape timings weighted by stage lengths.
pub fn schedule_speedup(
    multigrid: &MultigridSchedule,
    baseline: &MultigridSchedule,
    timings: &[ShapeTiming],
) -> Result<SpeedupReport> {
    let baseline_ms = predicted_ms(baseline, timings)?;
    let multigrid_ms = predicted_ms(multigrid, timings)?;
    Ok(SpeedupReport {
        baseline_ms,
        multigrid_ms,
        predicted: baseline_ms / multigrid_ms,
        measured: None,
    })
}

/// Ratio of total measured training time, baseline over multigrid.
pub fn measured_speedup(baseline: &RunRecord, multigrid: &RunRecord) -> f64 {
    baseline.train_ms() / multigrid.train_ms()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::Spatial;

    #[test]
    fn larger_shapes_take_longer() {
        let params = TinyRvsrParams::<f32>::init(0, 4, 1).unwrap();
        let small = MinibatchShape::new(1, 3, Spatial::square(8));
        let large = MinibatchShape::new(1, 7, Spatial::square(16));
        let t = bench_shapes(&params, &[small, large], 5, 1, 1).unwrap();
        assert!(t[0].mean_ms < t[1].mean_ms, "{t:?}");
        assert!(bench_shapes(&params, &[small], 4, 1, 1).is_err());
    }

    #[test]
    fn equal_schedules_have_unit_speedup() {
        let shape = MinibatchShape::new(2, 3, Spatial::square(8));
        let timing = ShapeTiming { shape, mean_ms: 3.5, reps: 5, workers: 1 };
        let s = MultigridSchedule::fixed(Spatial::square(8), 3, 100, 2).unwrap();
        assert_eq!(schedule_speedup(&s, &s, &[timing]).unwrap().predicted, 1.0);
        let other = MultigridSchedule::fixed(Spatial::square(4), 3, 100, 2).unwrap();
        assert!(schedule_speedup(&other, &s, &[timing]).is_err());
    }
}
