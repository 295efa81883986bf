//! RMSprop: each gradient coordinate is divided by the root of a moving
//! average of its squared history.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Optimiser state: one accumulator per parameter slot.
#[derive(Debug, Clone, PartialEq)]
pub struct RmspropState {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    accumulators: Vec<Option<Tensor>>,
}

impl RmspropState {
    pub fn new(learning_rate: f64, decay: f64, epsilon: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Argument(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::Argument(format!("decay must lie in (0, 1), got {decay}")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::Argument(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(RmspropState {
            learning_rate,
            decay,
            epsilon,
            accumulators: Vec::new(),
        })
    }

    /// Accumulator of `slot`, if it has been touched yet.
    pub fn accumulator(&self, slot: usize) -> Option<&Tensor> {
        self.accumulators.get(slot).and_then(Option::as_ref)
    }

    /// Updates one parameter tensor in place:
    /// `acc ← ρ·acc + (1−ρ)·g²`, `θ ← θ − α·scale·g / (√acc + ε)`.
    pub fn step(
        &mut self,
        slot: usize,
        name: &str,
        param: &mut Tensor,
        grad: &Tensor,
        scale: f64,
    ) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::Dimension(format!(
                "gradient of `{name}` has shape {:?}, parameter is {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        if !grad.all_finite() {
            return Err(Error::Training(format!("non-finite gradient in `{name}`")));
        }
        if self.accumulators.len() <= slot {
            self.accumulators.resize(slot + 1, None);
        }
        let acc = self.accumulators[slot].get_or_insert_with(|| Tensor::zeros(param.shape()));
        if acc.shape() != param.shape() {
            return Err(Error::Dimension(format!(
                "optimiser slot {slot} (`{name}`) was created for shape {:?}, got {:?}",
                acc.shape(),
                param.shape()
            )));
        }
        let (rho, step, eps) = (self.decay, self.learning_rate * scale, self.epsilon);
        for ((p, a), &g) in param
            .data_mut()
            .iter_mut()
            .zip(acc.data_mut())
            .zip(grad.data())
        {
            *a = rho * *a + (1.0 - rho) * g * g;
            *p -= step * g / (a.sqrt() + eps);
        }
        Ok(())
    }
}
