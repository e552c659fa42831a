//! JSON experiment configuration.
//!
//! Schedule-critical fields (total iterations, base learning rate, warmup,
//! crop shapes) have no defaults: shapes are either listed or explicitly
//! marked `{"derive": ...}`. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataConfig;
use crate::metrics::ColorMode;
use crate::schedule::{
    compose_hierarchical, compose_synchronous, derive_spatial_sizes, derive_temporal_sizes, scaled_lr, AnnealMode,
    LrSpec, MultigridSchedule, Spatial, SpatialCycle, StagePlan, TemporalCycle,
};
use crate::train::{OptimizerKind, TrainSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleMode {
    /// Every temporal size inside every spatial size.
    Hierarchical,
    /// Spatial and temporal lists zipped pairwise.
    Synchronous,
    /// A single shape for the whole run.
    Fixed,
}

/// A crop size: `16` for 16×16 or `[h, w]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SizeSpec {
    Square(usize),
    Rect([usize; 2]),
}

impl SizeSpec {
    pub fn spatial(self) -> Spatial {
        match self {
            SizeSpec::Square(s) => Spatial::square(s),
            SizeSpec::Rect([h, w]) => Spatial::new(h, w),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum SpatialSpec {
    List(Vec<SizeSpec>),
    Derive { derive: SizeSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum TemporalSpec {
    List(Vec<usize>),
    Derive { derive: usize },
}

/// A stage appended after the composed schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtraStage {
    pub spatial: SizeSpec,
    pub temporal: usize,
    pub batch: usize,
    pub iterations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub mode: ScheduleMode,
    pub spatial: SpatialSpec,
    pub temporal: TemporalSpec,
    /// Iterations of the composed stages, extra stages not included.
    pub total_iterations: u64,
    pub batch: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_stages: Vec<ExtraStage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSection {
    /// Learning rate at `base_batch`; scaled linearly to the schedule batch.
    pub base: f64,
    pub base_batch: usize,
    pub mode: AnnealMode,
    pub warmup_iters: u64,
    #[serde(default)]
    pub warmup_start_factor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub channels: usize,
    pub blocks: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Validation every this many iterations; 0 evaluates only at the end.
    #[serde(default)]
    pub eval_interval: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub color: ColorMode,
    /// Output directory when none is given on the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

fn one() -> usize {
    1
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            eval_interval: 0,
            precision: Precision::F32,
            workers: 1,
            optimizer: OptimizerKind::default(),
            color: ColorMode::default(),
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schedule: ScheduleSection,
    pub lr: LrSection,
    pub model: ModelSection,
    pub data: DataConfig,
    #[serde(default)]
    pub run: RunSection,
}

/// A config that passed validation, with its derived objects.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub schedule: MultigridSchedule,
    pub lr: LrSpec,
}

impl Resolved {
    pub fn train_spec(&self) -> TrainSpec {
        let c = &self.config;
        TrainSpec {
            schedule: self.schedule.clone(),
            lr: self.lr,
            optimizer: c.run.optimizer,
            channels: c.model.channels,
            blocks: c.model.blocks,
            seed: c.model.seed,
            eval_interval: c.run.eval_interval,
            color: c.run.color,
            workers: c.run.workers,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    fn spatial_cycle(&self) -> Result<SpatialCycle> {
        let cycle = match &self.schedule.spatial {
            SpatialSpec::List(sizes) => SpatialCycle::new(sizes.iter().map(|s| s.spatial()).collect()),
            SpatialSpec::Derive { derive } => {
                let sp = derive.spatial();
                derive_spatial_sizes(sp.height, sp.width)
            }
        };
        cycle.map_err(|e| ConfigError::Invalid(format!("schedule.spatial: {e}")))
    }

    fn temporal_cycle(&self) -> Result<TemporalCycle> {
        let cycle = match &self.schedule.temporal {
            TemporalSpec::List(sizes) => TemporalCycle::new(sizes.clone()),
            TemporalSpec::Derive { derive } => derive_temporal_sizes(*derive),
        };
        cycle.map_err(|e| ConfigError::Invalid(format!("schedule.temporal: {e}")))
    }

    fn build_schedule(&self) -> Result<MultigridSchedule> {
        let s = &self.schedule;
        let spatial = self.spatial_cycle()?;
        let temporal = self.temporal_cycle()?;
        let err = |e: crate::schedule::ScheduleError| ConfigError::Invalid(format!("schedule: {e}"));
        let mut sched = match s.mode {
            ScheduleMode::Hierarchical => compose_hierarchical(&spatial, &temporal, s.total_iterations, s.batch),
            ScheduleMode::Synchronous => {
                if spatial.count() != temporal.count() {
                    return invalid(format!(
                        "synchronous schedule needs equally long cycles, got {} spatial and {} temporal sizes",
                        spatial.count(),
                        temporal.count()
                    ));
                }
                let pairs: Vec<_> = spatial.sizes().iter().copied().zip(temporal.sizes().iter().copied()).collect();
                compose_synchronous(&pairs, s.total_iterations, s.batch)
            }
            ScheduleMode::Fixed => {
                if spatial.count() != 1 || temporal.count() != 1 {
                    return invalid("fixed schedule needs exactly one spatial and one temporal size");
                }
                MultigridSchedule::fixed(spatial.sizes()[0], temporal.sizes()[0], s.total_iterations, s.batch)
            }
        }
        .map_err(err)?;
        for extra in &s.extra_stages {
            let plan = StagePlan::new(extra.spatial.spatial(), extra.temporal, extra.batch, extra.iterations)
                .map_err(err)?;
            sched = sched.append_stage(plan).map_err(err)?;
        }
        Ok(sched)
    }

    /// Checks every section and the constraints between them.
    pub fn resolve(&self) -> Result<Resolved> {
        self.data
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("data: {e}")))?;
        let schedule = self.build_schedule()?;

        let (lr_h, lr_w) = self.data.lr_size();
        for stage in schedule.stages() {
            if stage.spatial.height > lr_h || stage.spatial.width > lr_w {
                return invalid(format!(
                    "stage crop {} exceeds the {lr_h}x{lr_w} LR frames of {}x{} clips",
                    stage.spatial, self.data.height, self.data.width
                ));
            }
        }
        if self.data.height < 11 || self.data.width < 11 {
            return invalid("validation frames must be at least 11x11 HR for SSIM");
        }

        let l = &self.lr;
        let base = scaled_lr(l.base, l.base_batch, self.schedule.batch)
            .map_err(|e| ConfigError::Invalid(format!("lr: {e}")))?;
        let lr = LrSpec::new(base, l.mode, l.warmup_iters, l.warmup_start_factor)
            .and_then(|spec| spec.validate_for(&schedule).map(|_| spec))
            .map_err(|e| ConfigError::Invalid(format!("lr: {e}")))?;

        if self.model.channels == 0 {
            return invalid("model.channels must be positive");
        }
        if self.run.workers == 0 {
            return invalid("run.workers must be positive");
        }
        Ok(Resolved {
            config: self.clone(),
            schedule,
            lr,
        })
    }
}
