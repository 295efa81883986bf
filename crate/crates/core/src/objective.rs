//! Classification and reconstruction losses and their convex combination.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest probability fed to `ln` in the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

/// Batch-mean loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub batch_size: usize,
}

/// One-hot rows for integer labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Argument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut t = Tensor::zeros(&[labels.len().max(1), classes]);
    for (row, &l) in labels.iter().enumerate() {
        t.data_mut()[row * classes + l] = 1.0;
    }
    Ok(t)
}

/// Mean negative log-likelihood of softmax rows `pred` under one-hot
/// targets, with the combined softmax-plus-cross-entropy gradient with
/// respect to the logits, `(pred − onehot) / B`.
pub fn cross_entropy(pred: &Tensor, onehot: &Tensor) -> Result<(LossValue, Tensor)> {
    pred.expect_rank(2, "cross_entropy")?;
    pred.expect_same_shape(onehot)?;
    let (batch, m) = (pred.shape()[0], pred.shape()[1]);
    let mut total = 0.0;
    for (r, (p, y)) in pred
        .data()
        .chunks(m)
        .zip(onehot.data().chunks(m))
        .enumerate()
    {
        let ones = y.iter().filter(|&&v| v == 1.0).count();
        let zeros = y.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != m - 1 {
            return Err(Error::Argument(format!(
                "target row {r} is not one-hot: {y:?}"
            )));
        }
        let k = y.iter().position(|&v| v == 1.0).unwrap_or(0);
        total -= p[k].clamp(PROB_FLOOR, 1.0).ln();
    }
    let grad = pred.zip_map(onehot, |p, y| (p - y) / batch as f64)?;
    Ok((
        LossValue {
            value: total / batch as f64,
            batch_size: batch,
        },
        grad,
    ))
}

/// Mean over the batch of per-sample squared Euclidean distance, and its
/// gradient `2(recon − target) / B`.
pub fn squared_loss(recon: &Tensor, target: &Tensor) -> Result<(LossValue, Tensor)> {
    recon.expect_same_shape(target)?;
    let batch = recon.shape()[0];
    let total: f64 = recon
        .data()
        .iter()
        .zip(target.data())
        .map(|(r, t)| (r - t) * (r - t))
        .sum();
    let grad = recon.zip_map(target, |r, t| 2.0 * (r - t) / batch as f64)?;
    Ok((
        LossValue {
            value: total / batch as f64,
            batch_size: batch,
        },
        grad,
    ))
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Argument(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    Ok(())
}

/// `λ·lc + (1 − λ)·lr`.
pub fn joint_objective(lc: LossValue, lr: LossValue, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    if lambda == 1.0 {
        return Ok(lc.value);
    }
    if lambda == 0.0 {
        return Ok(lr.value);
    }
    Ok(lambda * lc.value + (1.0 - lambda) * lr.value)
}
