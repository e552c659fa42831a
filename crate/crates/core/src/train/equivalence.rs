//! Large-minibatch equivalence under plain SGD.
//!
//! `m` sequential steps of size `η` on minibatches `X_1..X_m` (each of size
//! `n`) against one step of size `mη` on their union. With every gradient
//! frozen at the starting weights the two updates agree exactly; letting the
//! sequential steps move the weights introduces a gap of order `η²`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::model::{backward_sequence, forward_sequence, TinyRvsrParams};

use super::loss::charbonnier_part;
use super::optim::OptimizerKind;
use super::{Result, TrainError};

/// Relative tolerance of the frozen-gradient comparison at f64.
pub const FROZEN_TOLERANCE: f64 = 1e-10;
/// Accepted range of the fitted log-log drift slope.
pub const DRIFT_ORDER_RANGE: (f64, f64) = (1.7, 2.3);

/// A differentiable loss over a flat f64 weight vector.
pub trait Objective {
    type Sample: Clone;

    fn param_count(&self) -> usize;

    /// Gradient of the mean per-sample loss over `samples` at `w`.
    fn gradient(&self, w: &[f64], samples: &[Self::Sample]) -> Result<Vec<f64>>;
}

/// A regression example `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: f64,
}

/// `½(wᵀx − y)²`.
#[derive(Debug, Clone, Copy)]
pub struct LeastSquares {
    pub dim: usize,
}

impl Objective for LeastSquares {
    type Sample = Example;

    fn param_count(&self) -> usize {
        self.dim
    }

    fn gradient(&self, w: &[f64], samples: &[Example]) -> Result<Vec<f64>> {
        check_call(w.len(), self.dim, samples.len())?;
        let mut g = vec![0.0; self.dim];
        for s in samples {
            let r: f64 = w.iter().zip(&s.x).map(|(a, b)| a * b).sum::<f64>() - s.y;
            g.iter_mut().zip(&s.x).for_each(|(gi, xi)| *gi += r * xi);
        }
        let inv = 1.0 / samples.len() as f64;
        g.iter_mut().for_each(|v| *v *= inv);
        Ok(g)
    }
}

/// One hidden tanh layer and a scalar output, squared loss.
///
/// Weight layout: `W1` (hidden×inputs), `b1` (hidden), `w2` (hidden), `b2`.
#[derive(Debug, Clone, Copy)]
pub struct ToyMlp {
    pub inputs: usize,
    pub hidden: usize,
}

impl ToyMlp {
    fn predict(&self, w: &[f64], x: &[f64]) -> (f64, Vec<f64>) {
        let (w1, rest) = w.split_at(self.hidden * self.inputs);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.hidden);
        let act: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let row = &w1[j * self.inputs..(j + 1) * self.inputs];
                (row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b1[j]).tanh()
            })
            .collect();
        let out = act.iter().zip(w2).map(|(a, b)| a * b).sum::<f64>() + b2[0];
        (out, act)
    }

    pub fn loss(&self, w: &[f64], samples: &[Example]) -> f64 {
        samples
            .iter()
            .map(|s| 0.5 * (self.predict(w, &s.x).0 - s.y).powi(2))
            .sum::<f64>()
            / samples.len() as f64
    }
}

impl Objective for ToyMlp {
    type Sample = Example;

    fn param_count(&self) -> usize {
        self.hidden * self.inputs + 2 * self.hidden + 1
    }

    fn gradient(&self, w: &[f64], samples: &[Example]) -> Result<Vec<f64>> {
        check_call(w.len(), self.param_count(), samples.len())?;
        let (hi, ni) = (self.hidden, self.inputs);
        let w2 = &w[hi * ni + hi..hi * ni + 2 * hi];
        let mut g = vec![0.0; w.len()];
        for s in samples {
            let (out, act) = self.predict(w, &s.x);
            let r = out - s.y;
            for j in 0..hi {
                let gz = r * w2[j] * (1.0 - act[j] * act[j]);
                for i in 0..ni {
                    g[j * ni + i] += gz * s.x[i];
                }
                g[hi * ni + j] += gz;
                g[hi * ni + hi + j] += r * act[j];
            }
            g[hi * ni + 2 * hi] += r;
        }
        let inv = 1.0 / samples.len() as f64;
        g.iter_mut().for_each(|v| *v *= inv);
        Ok(g)
    }
}

/// The video model at f64 with the Charbonnier loss; each sample is a
/// one-clip batch.
#[derive(Debug, Clone, Copy)]
pub struct RvsrObjective {
    pub channels: usize,
    pub blocks: usize,
}

impl Objective for RvsrObjective {
    type Sample = Batch<f64>;

    fn param_count(&self) -> usize {
        TinyRvsrParams::<f64>::zeros(self.channels, self.blocks).param_count()
    }

    fn gradient(&self, w: &[f64], samples: &[Batch<f64>]) -> Result<Vec<f64>> {
        let mut params = TinyRvsrParams::<f64>::zeros(self.channels, self.blocks);
        check_call(w.len(), params.param_count(), samples.len())?;
        params.assign_flat(w)?;
        let count: usize = samples.iter().map(|s| s.hr.len()).sum();
        let mut total = params.zeros_like();
        for s in samples {
            let (sr, cache) = forward_sequence(&params, &s.lr)?;
            let (_, grad) = charbonnier_part(&sr, &s.hr, count)?;
            total.accumulate(&backward_sequence(&params, &cache, &grad)?)?;
        }
        Ok(total.flatten())
    }
}

fn check_call(got: usize, want: usize, samples: usize) -> Result<()> {
    if got != want {
        return Err(TrainError::Shape(format!("{got} weights for a model with {want}")));
    }
    if samples == 0 {
        return Err(TrainError::Shape("gradient over zero samples".into()));
    }
    Ok(())
}

/// Random weights and `m` minibatches of `n` examples for the toy models.
pub fn toy_problem(seed: u64, weights: usize, inputs: usize, m: usize, n: usize) -> (Vec<f64>, Vec<Vec<Example>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = (0..weights).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let batches = (0..m)
        .map(|_| {
            (0..n)
                .map(|_| Example {
                    x: (0..inputs).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    y: rng.gen_range(-1.0..1.0),
                })
                .collect()
        })
        .collect();
    (w, batches)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrozenCheck {
    /// ‖Δw‖ of the m frozen small steps.
    pub delta_norm: f64,
    /// ‖Δw − Δw'‖.
    pub gap: f64,
    pub relative_gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftPoint {
    pub eta: f64,
    /// ‖w_{t+m} − w'_{t+1}‖.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub m: usize,
    pub n: usize,
    pub eta: f64,
    pub frozen: FrozenCheck,
    pub frozen_passed: bool,
    pub drift: Vec<DriftPoint>,
    /// Least-squares slope of log gap against log η; absent when fewer than
    /// two gaps are nonzero.
    pub drift_order: Option<f64>,
    pub drift_passed: bool,
}

fn require_sgd(kind: OptimizerKind) -> Result<()> {
    if kind != OptimizerKind::Sgd {
        return Err(TrainError::Config(format!(
            "equivalence holds for plain SGD only, not {kind}"
        )));
    }
    Ok(())
}

fn check_batches<T>(batches: &[Vec<T>]) -> Result<usize> {
    let n = batches.first().map_or(0, Vec::len);
    if n == 0 || batches.iter().any(|b| b.len() != n) {
        return Err(TrainError::Config("need m ≥ 1 nonempty minibatches of equal size".into()));
    }
    Ok(n)
}

fn union<T: Clone>(batches: &[Vec<T>]) -> Vec<T> {
    batches.iter().flatten().cloned().collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Compares `Δw = −η Σ_i ∇(X_i)` with `Δw' = −mη ∇(∪X_i)`, all gradients
/// taken at the same `w`.
pub fn equivalence_frozen<O: Objective>(
    obj: &O,
    w: &[f64],
    batches: &[Vec<O::Sample>],
    eta: f64,
    kind: OptimizerKind,
) -> Result<FrozenCheck> {
    require_sgd(kind)?;
    check_batches(batches)?;
    let m = batches.len() as f64;
    let mut small = vec![0.0; w.len()];
    for b in batches {
        let g = obj.gradient(w, b)?;
        small.iter_mut().zip(&g).for_each(|(d, gi)| *d -= eta * gi);
    }
    let big: Vec<f64> = obj
        .gradient(w, &union(batches))?
        .iter()
        .map(|g| -m * eta * g)
        .collect();
    let delta_norm = distance(&small, &vec![0.0; w.len()]);
    let gap = distance(&small, &big);
    let relative_gap = if delta_norm == 0.0 { gap } else { gap / delta_norm };
    Ok(FrozenCheck { delta_norm, gap, relative_gap })
}

/// Runs the true sequential small steps against the single scaled step for
/// every η in `etas`.
pub fn equivalence_drift<O: Objective>(
    obj: &O,
    w: &[f64],
    batches: &[Vec<O::Sample>],
    etas: &[f64],
    kind: OptimizerKind,
) -> Result<Vec<DriftPoint>> {
    require_sgd(kind)?;
    check_batches(batches)?;
    if etas.is_empty() || etas.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        return Err(TrainError::Config(format!("learning rates {etas:?} must be positive")));
    }
    let m = batches.len() as f64;
    let all = union(batches);
    let g_big = obj.gradient(w, &all)?;
    etas.iter()
        .map(|&eta| {
            let mut seq = w.to_vec();
            for b in batches {
                let g = obj.gradient(&seq, b)?;
                seq.iter_mut().zip(&g).for_each(|(x, gi)| *x -= eta * gi);
            }
            let big: Vec<f64> = w.iter().zip(&g_big).map(|(x, g)| x - m * eta * g).collect();
            Ok(DriftPoint { eta, gap: distance(&seq, &big) })
        })
        .collect()
}

/// Slope of the least-squares line through `(ln η, ln gap)`.
pub fn fit_drift_order(points: &[DriftPoint]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.gap > 0.0)
        .map(|p| (p.eta.ln(), p.gap.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Frozen check at `etas[0]` plus the drift sweep over all of `etas`.
pub fn equivalence_report<O: Objective>(
    obj: &O,
    w: &[f64],
    batches: &[Vec<O::Sample>],
    etas: &[f64],
    kind: OptimizerKind,
) -> Result<EquivalenceReport> {
    let drift = equivalence_drift(obj, w, batches, etas, kind)?;
    let eta = etas[0];
    let frozen = equivalence_frozen(obj, w, batches, eta, kind)?;
    let drift_order = fit_drift_order(&drift);
    let drift_passed = match drift_order {
        Some(k) => (DRIFT_ORDER_RANGE.0..=DRIFT_ORDER_RANGE.1).contains(&k),
        None => batches.len() == 1 && drift.iter().all(|p| p.gap == 0.0),
    };
    Ok(EquivalenceReport {
        m: batches.len(),
        n: batches[0].len(),
        eta,
        frozen,
        frozen_passed: frozen.relative_gap <= FROZEN_TOLERANCE,
        drift,
        drift_order,
        drift_passed,
    })
}
