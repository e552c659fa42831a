//! Multigrid training schedules and the restarting cosine learning-rate rule.
//!
//! A schedule is an ordered list of spatial-temporal stages. Each stage trains
//! for a fixed number of iterations at one minibatch shape, and the stages
//! partition `[0, total_iterations)` into half-open intervals. The learning
//! rate restarts at the base value at every stage boundary and anneals with a
//! cosine inside the stage.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("total iterations {total} is smaller than the stage count {stages}")]
    TooFewIterations { total: u64, stages: usize },
    #[error("stage needs at least one iteration")]
    EmptyStage,
    #[error("batch size must be positive")]
    EmptyBatch,
    #[error("schedule has no stages")]
    NoStages,
    #[error("iteration {t} outside [0, {total})")]
    OutOfRange { t: u64, total: u64 },
    #[error("invalid learning-rate spec: {0}")]
    InvalidLr(String),
    #[error("base batch must be positive")]
    ZeroBaseBatch,
}

pub type Result<T> = std::result::Result<T, ScheduleError>;

/// Spatial crop size in LR pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Spatial {
    pub height: usize,
    pub width: usize,
}

impl Spatial {
    pub fn new(height: usize, width: usize) -> Self {
        Spatial { height, width }
    }

    pub fn square(side: usize) -> Self {
        Spatial::new(side, side)
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for Spatial {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

fn warn_if_tiny(sp: Spatial) {
    if sp.height < 8 || sp.width < 8 {
        log::warn!("spatial size {sp} is below 8x8; small crops tend to degrade accuracy");
    }
}

/// Ordered spatial sizes, one per spatial stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatialCycle {
    sizes: Vec<Spatial>,
}

impl SpatialCycle {
    pub fn new(sizes: Vec<Spatial>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(ScheduleError::InvalidSize("spatial cycle is empty".into()));
        }
        for sp in &sizes {
            if sp.height == 0 || sp.width == 0 {
                return Err(ScheduleError::InvalidSize(format!("spatial size {sp}")));
            }
            warn_if_tiny(*sp);
        }
        if sizes.windows(2).any(|w| w[1].area() < w[0].area()) {
            return Err(ScheduleError::InvalidSize(
                "spatial areas must be nondecreasing".into(),
            ));
        }
        Ok(SpatialCycle { sizes })
    }

    pub fn sizes(&self) -> &[Spatial] {
        &self.sizes
    }

    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

/// Ordered temporal sizes (frames per sample), one per temporal stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemporalCycle {
    sizes: Vec<usize>,
}

impl TemporalCycle {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(ScheduleError::InvalidSize("temporal cycle is empty".into()));
        }
        if sizes.iter().any(|&t| t == 0) {
            return Err(ScheduleError::InvalidSize("temporal size 0".into()));
        }
        if sizes.windows(2).any(|w| w[1] < w[0]) {
            return Err(ScheduleError::InvalidSize(
                "temporal sizes must be nondecreasing".into(),
            ));
        }
        Ok(TemporalCycle { sizes })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

/// Two-stage spatial cycle: `max(32, H/2) x max(32, W/2)` followed by `H x W`.
pub fn derive_spatial_sizes(height: usize, width: usize) -> Result<SpatialCycle> {
    if height < 2 || width < 2 {
        return Err(ScheduleError::InvalidSize(format!(
            "cannot derive a spatial cycle from {height}x{width}"
        )));
    }
    // The clamp to 32 may exceed a baseline smaller than 64; cap at the baseline.
    let half = |d: usize| (d / 2).max(32).min(d);
    SpatialCycle::new(vec![
        Spatial::new(half(height), half(width)),
        Spatial::new(height, width),
    ])
}

/// Three-stage temporal cycle: `max(6, T/2)`, `3T/4`, `T`, each clamped into
/// `[previous, T]`.
pub fn derive_temporal_sizes(frames: usize) -> Result<TemporalCycle> {
    if frames == 0 {
        return Err(ScheduleError::InvalidSize("temporal size 0".into()));
    }
    let first = (frames / 2).max(6).min(frames);
    let second = (3 * frames / 4).clamp(first, frames);
    TemporalCycle::new(vec![first, second, frames])
}

/// One spatial-temporal stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub spatial: Spatial,
    pub temporal: usize,
    pub batch: usize,
    pub iterations: u64,
}

impl StagePlan {
    pub fn new(spatial: Spatial, temporal: usize, batch: usize, iterations: u64) -> Result<Self> {
        if iterations == 0 {
            return Err(ScheduleError::EmptyStage);
        }
        if batch == 0 {
            return Err(ScheduleError::EmptyBatch);
        }
        if spatial.area() == 0 || temporal == 0 {
            return Err(ScheduleError::InvalidSize(format!(
                "stage shape {spatial}&{temporal}"
            )));
        }
        warn_if_tiny(spatial);
        Ok(StagePlan {
            spatial,
            temporal,
            batch,
            iterations,
        })
    }

    pub fn shape(&self) -> MinibatchShape {
        MinibatchShape {
            batch: self.batch,
            temporal: self.temporal,
            spatial: self.spatial,
        }
    }
}

/// Shape of one training minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MinibatchShape {
    pub batch: usize,
    pub temporal: usize,
    pub spatial: Spatial,
}

impl MinibatchShape {
    pub fn new(batch: usize, temporal: usize, spatial: Spatial) -> Self {
        MinibatchShape {
            batch,
            temporal,
            spatial,
        }
    }

    /// LR pixels processed by one iteration.
    pub fn volume(&self) -> usize {
        self.batch * self.temporal * self.spatial.area()
    }
}

impl std::fmt::Display for MinibatchShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}&{}x{}", self.spatial, self.temporal, self.batch)
    }
}

/// Ordered stages partitioning `[0, total_iterations)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultigridSchedule {
    stages: Vec<StagePlan>,
    // starts[j] = sum of iterations of stages before j
    starts: Vec<u64>,
    total_iterations: u64,
}

impl MultigridSchedule {
    pub fn from_stages(stages: Vec<StagePlan>) -> Result<Self> {
        if stages.is_empty() {
            return Err(ScheduleError::NoStages);
        }
        let mut starts = Vec::with_capacity(stages.len());
        let mut acc = 0u64;
        for st in &stages {
            if st.iterations == 0 {
                return Err(ScheduleError::EmptyStage);
            }
            if st.batch == 0 {
                return Err(ScheduleError::EmptyBatch);
            }
            starts.push(acc);
            acc += st.iterations;
        }
        Ok(MultigridSchedule {
            stages,
            starts,
            total_iterations: acc,
        })
    }

    /// Baseline training: one stage at a fixed shape.
    pub fn fixed(spatial: Spatial, temporal: usize, total: u64, batch: usize) -> Result<Self> {
        Self::from_stages(vec![StagePlan::new(spatial, temporal, batch, total)?])
    }

    pub fn stages(&self) -> &[StagePlan] {
        &self.stages
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn total_iterations(&self) -> u64 {
        self.total_iterations
    }

    /// First iteration of each stage.
    pub fn stage_starts(&self) -> &[u64] {
        &self.starts
    }

    /// Zero-based index of the stage containing `t`.
    pub fn stage_index(&self, t: u64) -> Result<usize> {
        if t >= self.total_iterations {
            return Err(ScheduleError::OutOfRange {
                t,
                total: self.total_iterations,
            });
        }
        // starts[0] == 0 <= t, so the partition point is at least 1.
        Ok(self.starts.partition_point(|&s| s <= t) - 1)
    }

    /// Minibatch shape at iteration `t` and the 1-based stage number s(t).
    pub fn shape_at(&self, t: u64) -> Result<(MinibatchShape, usize)> {
        let j = self.stage_index(t)?;
        Ok((self.stages[j].shape(), j + 1))
    }

    /// Appends a stage after the current final stage.
    pub fn append_stage(&self, plan: StagePlan) -> Result<Self> {
        if plan.iterations == 0 {
            return Err(ScheduleError::EmptyStage);
        }
        let mut stages = self.stages.clone();
        stages.push(plan);
        Self::from_stages(stages)
    }

    /// Distinct shapes in order of first appearance.
    pub fn distinct_shapes(&self) -> Vec<MinibatchShape> {
        let mut out: Vec<MinibatchShape> = Vec::new();
        for st in &self.stages {
            let sh = st.shape();
            if !out.contains(&sh) {
                out.push(sh);
            }
        }
        out
    }
}

fn split_evenly(total: u64, parts: usize) -> Result<Vec<u64>> {
    if parts == 0 {
        return Err(ScheduleError::NoStages);
    }
    if total < parts as u64 {
        return Err(ScheduleError::TooFewIterations {
            total,
            stages: parts,
        });
    }
    let each = total / parts as u64;
    let mut v = vec![each; parts];
    v[parts - 1] += total - each * parts as u64;
    Ok(v)
}

/// Places a full temporal cycle inside every spatial stage: `s * f` stages of
/// equal length, remainder added to the last stage.
pub fn compose_hierarchical(
    spatial: &SpatialCycle,
    temporal: &TemporalCycle,
    total: u64,
    batch: usize,
) -> Result<MultigridSchedule> {
    let p = spatial.count() * temporal.count();
    let iters = split_evenly(total, p)?;
    let mut stages = Vec::with_capacity(p);
    let cells = spatial
        .sizes()
        .iter()
        .flat_map(|&sp| temporal.sizes().iter().map(move |&tp| (sp, tp)));
    for ((sp, tp), n) in cells.zip(iters) {
        stages.push(StagePlan::new(sp, tp, batch, n)?);
    }
    MultigridSchedule::from_stages(stages)
}

/// Changes spatial and temporal size together: one stage per pair.
pub fn compose_synchronous(
    pairs: &[(Spatial, usize)],
    total: u64,
    batch: usize,
) -> Result<MultigridSchedule> {
    if pairs.is_empty() {
        return Err(ScheduleError::NoStages);
    }
    let iters = split_evenly(total, pairs.len())?;
    let stages = pairs
        .iter()
        .zip(iters)
        .map(|(&(sp, tp), n)| StagePlan::new(sp, tp, batch, n))
        .collect::<Result<Vec<_>>>()?;
    MultigridSchedule::from_stages(stages)
}

/// Shape of the annealing curve inside a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnnealMode {
    /// `cos(x)` with no pi factor, x in [0, 1).
    #[default]
    LiteralCosine,
    /// `(1 + cos(pi x)) / 2`.
    HalfCosine,
}

impl AnnealMode {
    fn factor(self, x: f64) -> f64 {
        match self {
            AnnealMode::LiteralCosine => x.cos(),
            AnnealMode::HalfCosine => 0.5 * (1.0 + (std::f64::consts::PI * x).cos()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSpec {
    pub base_lr: f64,
    pub mode: AnnealMode,
    pub warmup_iters: u64,
    pub warmup_start_factor: f64,
}

impl LrSpec {
    pub fn new(base_lr: f64, mode: AnnealMode, warmup_iters: u64, warmup_start_factor: f64) -> Result<Self> {
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(ScheduleError::InvalidLr(format!("base lr {base_lr}")));
        }
        if !(0.0..=1.0).contains(&warmup_start_factor) {
            return Err(ScheduleError::InvalidLr(format!(
                "warmup start factor {warmup_start_factor} outside [0, 1]"
            )));
        }
        Ok(LrSpec {
            base_lr,
            mode,
            warmup_iters,
            warmup_start_factor,
        })
    }

    /// Literal cosine with the 5,000-iteration linear warmup from zero.
    pub fn with_default_warmup(base_lr: f64) -> Result<Self> {
        Self::new(base_lr, AnnealMode::LiteralCosine, 5000, 0.0)
    }

    pub fn without_warmup(base_lr: f64, mode: AnnealMode) -> Result<Self> {
        Self::new(base_lr, mode, 0, 0.0)
    }

    /// Checks the constraints that involve a schedule.
    pub fn validate_for(&self, sched: &MultigridSchedule) -> Result<()> {
        if self.warmup_iters >= sched.total_iterations() {
            return Err(ScheduleError::InvalidLr(format!(
                "warmup {} must be shorter than the {} training iterations",
                self.warmup_iters,
                sched.total_iterations()
            )));
        }
        Ok(())
    }

    fn warmup_factor(&self, t: u64) -> f64 {
        if t >= self.warmup_iters {
            return 1.0;
        }
        let frac = t as f64 / self.warmup_iters as f64;
        self.warmup_start_factor + (1.0 - self.warmup_start_factor) * frac
    }
}

/// Learning rate at iteration `t`.
///
/// Non-final stages anneal over the whole run length (`(t - start) / total`),
/// so they never decay far; the final stage anneals over its own length.
/// Warmup multiplies the result and applies only at the start of training.
pub fn lr_at(spec: &LrSpec, sched: &MultigridSchedule, t: u64) -> Result<f64> {
    let j = sched.stage_index(t)?;
    let offset = (t - sched.starts[j]) as f64;
    let span = if j + 1 == sched.stage_count() {
        sched.stages[j].iterations
    } else {
        sched.total_iterations
    };
    let annealed = spec.mode.factor(offset / span as f64) * spec.base_lr;
    Ok(annealed * spec.warmup_factor(t))
}

/// Linear scaling rule: `base_lr * actual_batch / base_batch`.
pub fn scaled_lr(base_lr: f64, base_batch: usize, actual_batch: usize) -> Result<f64> {
    if base_batch == 0 {
        return Err(ScheduleError::ZeroBaseBatch);
    }
    Ok(base_lr * (actual_batch as f64 / base_batch as f64))
}

pub const SCHEDULE_CSV_HEADER: &str = "t,stage,batch,temporal,height,width,lr";

/// Writes one row per `stride` iterations, starting at `t = 0`.
pub fn write_schedule_csv<W: Write>(
    mut out: W,
    sched: &MultigridSchedule,
    spec: &LrSpec,
    stride: u64,
) -> std::io::Result<()> {
    let stride = stride.max(1);
    writeln!(out, "{SCHEDULE_CSV_HEADER}")?;
    let mut t = 0;
    while t < sched.total_iterations() {
        let (shape, stage) = sched.shape_at(t).expect("t in range");
        let lr = lr_at(spec, sched, t).expect("t in range");
        writeln!(
            out,
            "{t},{stage},{},{},{},{},{lr:e}",
            shape.batch, shape.temporal, shape.spatial.height, shape.spatial.width
        )?;
        t += stride;
    }
    Ok(())
}
