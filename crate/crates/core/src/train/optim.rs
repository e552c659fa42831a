use serde::{Deserialize, Serialize};

use crate::tensor::Real;

use super::{Result, TrainError};

pub const MOMENTUM: f64 = 0.9;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
    #[default]
    Adam,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::SgdMomentum => "sgd-momentum",
            OptimizerKind::Adam => "adam",
        })
    }
}

/// `w ← w − lr·v` with `v ← momentum·v + g`. With `momentum = 0` this is
/// plain SGD and `velocity` is left untouched.
pub fn sgd_step<S: Real>(params: &mut [S], grads: &[S], lr: f64, momentum: f64, velocity: &mut [S]) {
    let lr = S::of(lr);
    if momentum == 0.0 {
        for (w, &g) in params.iter_mut().zip(grads) {
            *w = *w - lr * g;
        }
        return;
    }
    let mu = S::of(momentum);
    for ((w, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = mu * *v + g;
        *w = *w - lr * *v;
    }
}

/// Optimizer state over a flat parameter vector. The learning rate is passed
/// per step, so the state never depends on the schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<S> {
    kind: OptimizerKind,
    first: Vec<S>,
    second: Vec<S>,
    steps: u64,
}

impl<S: Real> OptimState<S> {
    pub fn new(kind: OptimizerKind, param_count: usize) -> Self {
        let (first, second) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::SgdMomentum => (vec![S::zero(); param_count], Vec::new()),
            OptimizerKind::Adam => (vec![S::zero(); param_count], vec![S::zero(); param_count]),
        };
        OptimState { kind, first, second, steps: 0 }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [S], grads: &[S], lr: f64) -> Result<()> {
        if params.len() != grads.len() || (!self.first.is_empty() && self.first.len() != params.len()) {
            return Err(TrainError::Shape(format!(
                "optimizer step over {} params with {} grads",
                params.len(),
                grads.len()
            )));
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => sgd_step(params, grads, lr, 0.0, &mut []),
            OptimizerKind::SgdMomentum => sgd_step(params, grads, lr, MOMENTUM, &mut self.first),
            OptimizerKind::Adam => {
                let (b1, b2) = (S::of(ADAM_BETA1), S::of(ADAM_BETA2));
                let c1 = 1.0 - ADAM_BETA1.powf(self.steps as f64);
                let c2 = 1.0 - ADAM_BETA2.powf(self.steps as f64);
                let step = S::of(lr / c1);
                let c2 = S::of(c2);
                let eps = S::of(ADAM_EPS);
                let one = S::one();
                for (((w, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    *w = *w - step * *m / ((*v / c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
