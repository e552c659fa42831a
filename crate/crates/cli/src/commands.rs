use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use mgvsr::config::{ExperimentConfig, Precision, Resolved};
use mgvsr::data::{Batch, BatchSampler, ClipPool, VideoClip};
use mgvsr::metrics::{combine, evaluate, MetricReport};
use mgvsr::model::{load_checkpoint, nearest_baseline, save_checkpoint, TinyRvsrParams};
use mgvsr::schedule::{write_schedule_csv, MinibatchShape, MultigridSchedule, Spatial};
use mgvsr::tensor::{Real, Workers};
use mgvsr::train::{
    bench_shapes, equivalence_report, evaluate_clips, schedule_speedup, toy_problem, train_run, EquivalenceReport,
    Objective, RunRecord, RvsrObjective, ShapeTiming, SpeedupReport, ToyMlp, TrainError, DRIFT_ORDER_RANGE,
    FROZEN_TOLERANCE,
};
use serde::Serialize;

use crate::{Common, Split};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;
pub const EXIT_CHECK_FAILED: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
    pub code: u8,
}

impl CliError {
    fn new(kind: &'static str, message: impl ToString) -> Self {
        CliError {
            kind,
            message: message.to_string(),
            code: EXIT_FAILURE,
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::new("io", e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::new("train", e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn resolve(common: &Common) -> Result<Resolved> {
    let mut cfg = ExperimentConfig::load(&common.config).map_err(|e| CliError::new("config", e))?;
    if let Some(seed) = common.seed {
        cfg.model.seed = seed;
    }
    if let Some(workers) = common.workers {
        cfg.run.workers = workers;
    }
    if let Some(p) = common.precision {
        cfg.run.precision = p.into();
    }
    cfg.resolve().map_err(|e| CliError::new("config", e))
}

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    let mut w = sink(out)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::new("io", e))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn out_dir(common: &Common, r: &Resolved) -> Result<PathBuf> {
    common
        .out
        .clone()
        .or_else(|| r.config.run.out.clone())
        .ok_or_else(|| CliError::new("usage", "an output directory is required (--out or run.out)"))
}

fn pool(r: &Resolved) -> Result<ClipPool> {
    ClipPool::generate(&r.config.data).map_err(|e| CliError::new("data", e))
}

pub fn schedule(common: &Common, stride: u64) -> Result<()> {
    let r = resolve(common)?;
    let mut w = sink(common.out.as_deref())?;
    write_schedule_csv(&mut w, &r.schedule, &r.lr, stride)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TrainReport {
    status: &'static str,
    iterations_completed: usize,
    total_iterations: u64,
    stages: usize,
    precision: Precision,
    workers: usize,
    /// Gradient and optimizer time, minibatch synthesis excluded.
    train_ms: f64,
    final_metrics: Option<MetricReport>,
    /// Validation score of plain nearest upsampling, for reference.
    nearest_upsample: MetricReport,
    aborted_at: Option<u64>,
}

fn write_record(dir: &Path, record: &RunRecord) -> Result<()> {
    let files: [(&str, fn(&RunRecord, &mut dyn Write) -> io::Result<()>); 3] = [
        ("records.csv", |r, w| r.write_records_csv(w)),
        ("timing.csv", |r, w| r.write_timing_csv(w)),
        ("metrics.csv", |r, w| r.write_metrics_csv(w)),
    ];
    for (name, write) in files {
        let mut w = BufWriter::new(File::create(dir.join(name))?);
        write(record, &mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn nearest_report(clips: &[VideoClip], r: &Resolved) -> Result<MetricReport> {
    let reports = clips
        .iter()
        .map(|clip| {
            let up = nearest_baseline(&clip.lr_clip::<f64>()).map_err(|e| CliError::new("model", e))?;
            evaluate(&up, &clip.hr_clip::<f64>(), r.config.run.color).map_err(|e| CliError::new("metrics", e))
        })
        .collect::<Result<Vec<_>>>()?;
    combine(&reports).ok_or_else(|| CliError::new("data", "no validation clips"))
}

fn run_training<S: Real>(r: &Resolved, pool: &ClipPool, dir: &Path) -> Result<()> {
    let spec = r.train_spec();
    let total = r.schedule.total_iterations();
    let report = |record: &RunRecord, status| -> Result<TrainReport> {
        Ok(TrainReport {
            status,
            iterations_completed: record.rows.len(),
            total_iterations: total,
            stages: r.schedule.stage_count(),
            precision: r.config.run.precision,
            workers: r.config.run.workers,
            train_ms: record.train_ms(),
            final_metrics: record.final_metrics,
            nearest_upsample: nearest_report(&pool.val, r)?,
            aborted_at: record.aborted_at,
        })
    };
    match train_run::<S>(&spec, pool) {
        Ok(out) => {
            write_record(dir, &out.record)?;
            save_checkpoint(&dir.join("ckpt"), &out.params, r.config.model.seed)
                .map_err(|e| CliError::new("checkpoint", e))?;
            write_json(Some(&dir.join("report.json")), &report(&out.record, "completed")?)
        }
        Err(TrainError::Diverged { iteration, record }) => {
            write_record(dir, &record)?;
            write_json(Some(&dir.join("report.json")), &report(&record, "diverged")?)?;
            Err(CliError {
                kind: "diverged",
                message: format!("non-finite loss or weights at iteration {iteration}"),
                code: EXIT_DIVERGED,
            })
        }
        Err(e) => Err(e.into()),
    }
}

pub fn train(common: &Common, dry_run: bool) -> Result<()> {
    let r = resolve(common)?;
    let mut effective = r.config.clone();
    effective.run.out = None;
    if dry_run {
        println!("{}", effective.to_json());
        return Ok(());
    }
    let dir = out_dir(common, &r)?;
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.json"), effective.to_json() + "\n")?;
    let pool = pool(&r)?;
    log::info!(
        "training {} iterations in {} stages ({}, {} worker(s))",
        r.schedule.total_iterations(),
        r.schedule.stage_count(),
        match r.config.run.precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        },
        r.config.run.workers
    );
    match r.config.run.precision {
        Precision::F32 => run_training::<f32>(&r, &pool, &dir),
        Precision::F64 => run_training::<f64>(&r, &pool, &dir),
    }
}

fn group<T>(mut items: Vec<T>, n: usize) -> Vec<Vec<T>> {
    let mut out = Vec::new();
    while !items.is_empty() {
        let rest = items.split_off(n.min(items.len()));
        out.push(items);
        items = rest;
    }
    out
}

fn check_report(report: &EquivalenceReport) -> Result<()> {
    if !report.frozen_passed {
        return Err(CliError {
            kind: "check-failed",
            message: format!(
                "frozen relative gap {:e} exceeds {FROZEN_TOLERANCE:e}",
                report.frozen.relative_gap
            ),
            code: EXIT_CHECK_FAILED,
        });
    }
    if !report.drift_passed {
        return Err(CliError {
            kind: "check-failed",
            message: format!(
                "drift order {:?} outside [{}, {}]",
                report.drift_order, DRIFT_ORDER_RANGE.0, DRIFT_ORDER_RANGE.1
            ),
            code: EXIT_CHECK_FAILED,
        });
    }
    Ok(())
}

pub fn equivalence(common: &Common, m: usize, n: usize, etas: &[f64], toy: bool) -> Result<()> {
    let r = resolve(common)?;
    if m == 0 || n == 0 {
        return Err(CliError::new("usage", "--m and --n must be positive"));
    }
    let kind = r.config.run.optimizer;
    let seed = r.config.model.seed;
    let report = if toy {
        let mlp = ToyMlp { inputs: 3, hidden: 8 };
        let (w, batches) = toy_problem(seed, mlp.param_count(), mlp.inputs, m, n);
        equivalence_report(&mlp, &w, &batches, etas, kind)?
    } else {
        let obj = RvsrObjective {
            channels: r.config.model.channels,
            blocks: r.config.model.blocks,
        };
        let w = TinyRvsrParams::<f64>::init(seed, obj.channels, obj.blocks)
            .map_err(|e| CliError::new("model", e))?
            .flatten();
        let stage = r.schedule.stages()[0];
        let shape = MinibatchShape::new(m * n, stage.temporal, stage.spatial);
        let batch = BatchSampler::new(seed)
            .sample_minibatch::<f64>(&pool(&r)?.train, &shape)
            .map_err(|e| CliError::new("data", e))?;
        let samples = (0..batch.len())
            .map(|i| batch.sample(i))
            .collect::<std::result::Result<Vec<Batch<f64>>, _>>()
            .map_err(|e| CliError::new("data", e))?;
        equivalence_report(&obj, &w, &group(samples, n), etas, kind)?
    };
    write_json(common.out.as_deref(), &report)?;
    check_report(&report)
}

/// Parses `HxW&T` or `HxW&TxN`; `default_batch` fills a missing `N`.
pub fn parse_shape(text: &str, default_batch: usize) -> Option<MinibatchShape> {
    let (spatial, rest) = text.trim().split_once('&')?;
    let (h, w) = spatial.split_once('x')?;
    let (t, n) = match rest.split_once('x') {
        Some((t, n)) => (t, n.parse().ok()?),
        None => (rest, default_batch),
    };
    let shape = MinibatchShape::new(n, t.parse().ok()?, Spatial::new(h.parse().ok()?, w.parse().ok()?));
    (shape.volume() > 0).then_some(shape)
}

#[derive(Serialize)]
struct BenchReport {
    precision: Precision,
    workers: usize,
    reps: usize,
    warmup: usize,
    timings: Vec<ShapeTiming>,
    /// Configured schedule against a fixed run at its final shape.
    speedup: Option<SpeedupReport>,
}

fn bench_with<S: Real>(r: &Resolved, shapes: &[MinibatchShape], reps: usize, warmup: usize) -> Result<Vec<ShapeTiming>> {
    let m = r.config.model;
    let params = TinyRvsrParams::<S>::init(m.seed, m.channels, m.blocks).map_err(|e| CliError::new("model", e))?;
    Ok(bench_shapes(&params, shapes, reps, warmup, r.config.run.workers)?)
}

pub fn bench(common: &Common, shapes: &[String], reps: usize, warmup: usize) -> Result<()> {
    let r = resolve(common)?;
    let batch = r.config.schedule.batch;
    let shapes = if shapes.is_empty() {
        r.schedule.distinct_shapes()
    } else {
        shapes
            .iter()
            .map(|s| parse_shape(s, batch).ok_or_else(|| CliError::new("usage", format!("bad shape '{s}', expected HxW&T or HxW&TxN"))))
            .collect::<Result<Vec<_>>>()?
    };
    let timings = match r.config.run.precision {
        Precision::F32 => bench_with::<f32>(&r, &shapes, reps, warmup)?,
        Precision::F64 => bench_with::<f64>(&r, &shapes, reps, warmup)?,
    };
    let last = *r.schedule.stages().last().expect("schedules are nonempty");
    let baseline = MultigridSchedule::fixed(last.spatial, last.temporal, r.schedule.total_iterations(), last.batch)
        .map_err(|e| CliError::new("schedule", e))?;
    let speedup = schedule_speedup(&r.schedule, &baseline, &timings).ok();
    write_json(
        common.out.as_deref(),
        &BenchReport {
            precision: r.config.run.precision,
            workers: r.config.run.workers,
            reps,
            warmup,
            timings,
            speedup,
        },
    )
}

fn eval_with<S: Real>(r: &Resolved, checkpoint: &Path, clips: &[VideoClip]) -> Result<Vec<MetricReport>> {
    let (params, _) = load_checkpoint::<S>(checkpoint).map_err(|e| CliError::new("checkpoint", e))?;
    Ok(evaluate_clips(&params, clips, r.config.run.color, &Workers::new(r.config.run.workers))?)
}

pub fn eval(common: &Common, checkpoint: &Path, split: Split) -> Result<()> {
    let r = resolve(common)?;
    let pool = pool(&r)?;
    let clips = match split {
        Split::Train => &pool.train,
        Split::Val => &pool.val,
    };
    let reports = match r.config.run.precision {
        Precision::F32 => eval_with::<f32>(&r, checkpoint, clips)?,
        Precision::F64 => eval_with::<f64>(&r, checkpoint, clips)?,
    };
    let mut w = sink(common.out.as_deref())?;
    writeln!(w, "clip,seed,frames,psnr_db,ssim")?;
    for (i, (clip, rep)) in clips.iter().zip(&reports).enumerate() {
        writeln!(w, "{i},{},{},{:.6},{:.6}", clip.seed, rep.frame_count, rep.psnr_db, rep.ssim)?;
    }
    let all = combine(&reports).ok_or_else(|| CliError::new("data", "empty split"))?;
    writeln!(w, "all,,{},{:.6},{:.6}", all.frame_count, all.psnr_db, all.ssim)?;
    w.flush()?;
    Ok(())
}

pub fn init(common: &Common, zero: bool) -> Result<()> {
    let r = resolve(common)?;
    let dir = out_dir(common, &r)?;
    let m = r.config.model;
    let params = if zero {
        TinyRvsrParams::<f64>::zeros(m.channels, m.blocks)
    } else {
        TinyRvsrParams::<f64>::init(m.seed, m.channels, m.blocks).map_err(|e| CliError::new("model", e))?
    };
    save_checkpoint(&dir, &params, m.seed).map_err(|e| CliError::new("checkpoint", e))
}
