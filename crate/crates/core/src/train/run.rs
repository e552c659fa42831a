use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, BatchSampler, ClipPool, VideoClip};
use crate::metrics::{combine, evaluate, ColorMode, MetricReport};
use crate::model::{backward_sequence, forward_sequence, TinyRvsrParams};
use crate::schedule::{lr_at, LrSpec, MultigridSchedule};
use crate::tensor::{Real, Workers};

use super::loss::charbonnier_part;
use super::optim::{OptimState, OptimizerKind};
use super::{Result, TrainError};

// Keeps the crop stream independent of the weight initialisation stream.
const SAMPLER_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone)]
pub struct TrainSpec {
    pub schedule: MultigridSchedule,
    pub lr: LrSpec,
    pub optimizer: OptimizerKind,
    pub channels: usize,
    pub blocks: usize,
    /// Seeds both the weights and the crop sampler.
    pub seed: u64,
    /// Validation every this many iterations; 0 evaluates only at the end.
    pub eval_interval: u64,
    pub color: ColorMode,
    pub workers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub t: u64,
    /// 1-based stage index.
    pub stage: usize,
    pub batch: usize,
    pub temporal: usize,
    pub height: usize,
    pub width: usize,
    pub lr: f64,
    pub loss: f64,
    /// Gradient computation plus optimizer step, minibatch synthesis excluded.
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    /// Iterations completed when the evaluation ran.
    pub iterations: u64,
    pub report: MetricReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub rows: Vec<IterationRow>,
    pub evals: Vec<EvalRow>,
    pub final_metrics: Option<MetricReport>,
    pub aborted_at: Option<u64>,
}

pub const RECORDS_CSV_HEADER: &str = "t,stage,batch,temporal,height,width,lr,loss";

impl RunRecord {
    /// Sum of per-iteration wall time in milliseconds.
    pub fn train_ms(&self) -> f64 {
        self.rows.iter().map(|r| r.wall_ms).sum()
    }

    /// Equal up to wall-clock timings.
    pub fn same_trajectory(&self, other: &RunRecord) -> bool {
        let strip = |r: &RunRecord| {
            let mut r = r.clone();
            r.rows.iter_mut().for_each(|row| row.wall_ms = 0.0);
            r
        };
        strip(self) == strip(other)
    }

    /// Deterministic per-iteration columns; timings go to
    /// [`Self::write_timing_csv`].
    pub fn write_records_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{RECORDS_CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{:e},{:e}",
                r.t, r.stage, r.batch, r.temporal, r.height, r.width, r.lr, r.loss
            )?;
        }
        Ok(())
    }

    pub fn write_timing_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,wall_ms")?;
        for r in &self.rows {
            writeln!(out, "{},{:.4}", r.t, r.wall_ms)?;
        }
        Ok(())
    }

    pub fn write_metrics_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "iterations,psnr_db,ssim,frames")?;
        for e in &self.evals {
            writeln!(
                out,
                "{},{:.6},{:.6},{}",
                e.iterations, e.report.psnr_db, e.report.ssim, e.report.frame_count
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub record: RunRecord,
    pub params: TinyRvsrParams<S>,
}

/// Mean Charbonnier loss of `batch` and its parameter gradient. Samples are
/// processed independently on `workers` and reduced in sample order, so the
/// result does not depend on the worker count.
pub fn gradient_step<S: Real>(
    params: &TinyRvsrParams<S>,
    samples: &[Batch<S>],
    workers: &Workers,
) -> Result<(f64, TinyRvsrParams<S>)> {
    let count: usize = samples.iter().map(|s| s.hr.len()).sum();
    let parts = workers.map(samples, |s| -> Result<(f64, TinyRvsrParams<S>)> {
        let (sr, cache) = forward_sequence(params, &s.lr)?;
        let (loss, grad) = charbonnier_part(&sr, &s.hr, count)?;
        Ok((loss, backward_sequence(params, &cache, &grad)?))
    });
    let mut loss = 0.0;
    let mut grads = params.zeros_like();
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grads.accumulate(&g)?;
    }
    Ok((loss, grads))
}

/// Metrics of each clip, super-resolved whole with outputs clamped to [0, 1].
pub fn evaluate_clips<S: Real>(
    params: &TinyRvsrParams<S>,
    clips: &[VideoClip],
    color: ColorMode,
    workers: &Workers,
) -> Result<Vec<MetricReport>> {
    workers
        .map(clips, |clip| -> Result<MetricReport> {
            let (sr, _) = forward_sequence(params, &clip.lr_clip::<S>())?;
            let sr = sr.map(|v| v.max(S::zero()).min(S::one()));
            Ok(evaluate(&sr, &clip.hr_clip::<S>(), color)?)
        })
        .into_iter()
        .collect()
}

/// Frame-weighted metrics over `clips`.
pub fn evaluate_params<S: Real>(
    params: &TinyRvsrParams<S>,
    clips: &[VideoClip],
    color: ColorMode,
    workers: &Workers,
) -> Result<MetricReport> {
    let reports = evaluate_clips(params, clips, color, workers)?;
    combine(&reports).ok_or_else(|| TrainError::Config("no validation clips".into()))
}

/// Trains a freshly initialised model on `pool.train` following the
/// schedule, evaluating on `pool.val`.
pub fn train_run<S: Real>(spec: &TrainSpec, pool: &ClipPool) -> Result<TrainOutcome<S>> {
    spec.lr.validate_for(&spec.schedule)?;
    let workers = Workers::new(spec.workers);
    let mut params = TinyRvsrParams::<S>::init(spec.seed, spec.channels, spec.blocks)?;
    let mut opt = OptimState::<S>::new(spec.optimizer, params.param_count());
    let mut sampler = BatchSampler::new(spec.seed ^ SAMPLER_STREAM);
    let total = spec.schedule.total_iterations();
    let mut record = RunRecord {
        rows: Vec::with_capacity(total as usize),
        ..RunRecord::default()
    };
    for t in 0..total {
        let (shape, stage) = spec.schedule.shape_at(t)?;
        let lr = lr_at(&spec.lr, &spec.schedule, t)?;
        let batch = sampler.sample_minibatch::<S>(&pool.train, &shape)?;
        let samples = (0..batch.len()).map(|i| batch.sample(i)).collect::<std::result::Result<Vec<_>, _>>()?;

        let start = Instant::now();
        let (loss, grads) = gradient_step(&params, &samples, &workers)?;
        let finite = loss.is_finite() && grads.all_finite();
        if finite {
            let mut flat = params.flatten();
            opt.step(&mut flat, &grads.flatten(), lr)?;
            params.assign_flat(&flat)?;
        }
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;

        record.rows.push(IterationRow {
            t,
            stage,
            batch: shape.batch,
            temporal: shape.temporal,
            height: shape.spatial.height,
            width: shape.spatial.width,
            lr,
            loss,
            wall_ms,
        });
        if !finite || !params.all_finite() {
            log::warn!("non-finite loss or weights at iteration {t}, aborting");
            record.aborted_at = Some(t);
            return Err(TrainError::Diverged {
                iteration: t,
                record: Box::new(record),
            });
        }
        let done = t + 1;
        if spec.eval_interval > 0 && done % spec.eval_interval == 0 && done < total {
            let report = evaluate_params(&params, &pool.val, spec.color, &workers)?;
            log::info!("iteration {done}: loss {loss:.5}, val {:.3} dB", report.psnr_db);
            record.evals.push(EvalRow { iterations: done, report });
        }
    }
    let report = evaluate_params(&params, &pool.val, spec.color, &workers)?;
    log::info!("finished {total} iterations: val {:.3} dB, ssim {:.4}", report.psnr_db, report.ssim);
    record.evals.push(EvalRow {
        iterations: total,
        report,
    });
    record.final_metrics = Some(report);
    Ok(TrainOutcome { record, params })
}
