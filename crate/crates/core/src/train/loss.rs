use crate::tensor::{Real, Tensor};

use super::{Result, TrainError};

/// Squared smoothing constant ε² of the Charbonnier penalty.
pub const CHARBONNIER_EPS2: f64 = 1e-12;

/// Mean Charbonnier loss `mean(sqrt(d² + ε²))` and its gradient w.r.t. `pred`.
pub fn loss_charbonnier<S: Real>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<(f64, Tensor<S>)> {
    charbonnier_part(pred, target, pred.len())
}

/// Charbonnier sum over this part divided by `count`, the element count of the
/// whole minibatch. Summing the parts of a minibatch gives the batch mean.
pub fn charbonnier_part<S: Real>(pred: &Tensor<S>, target: &Tensor<S>, count: usize) -> Result<(f64, Tensor<S>)> {
    if pred.shape() != target.shape() {
        return Err(TrainError::Shape(format!(
            "loss of {:?} against {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if count == 0 {
        return Err(TrainError::Shape("loss over zero elements".into()));
    }
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p.f64() - t.f64();
            let r = (d * d + CHARBONNIER_EPS2).sqrt();
            total += r;
            S::of(d / r * inv)
        })
        .collect();
    Ok((total * inv, Tensor::from_vec(pred.shape(), grad)?))
}
