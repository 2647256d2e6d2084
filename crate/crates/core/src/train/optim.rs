use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Step decay: the rate is multiplied by `gamma` once each milestone epoch
/// `floor(fraction * epochs)` has been reached.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub milestones: Vec<f64>,
    pub gamma: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            milestones: vec![0.6, 0.8],
            gamma: 0.1,
        }
    }
}

impl Schedule {
    /// Rate for zero-based `epoch` out of `epochs`.
    pub fn lr(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|m| epoch >= (*m * epochs as f64).floor() as usize)
            .count();
        base * self.gamma.powi(passed as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Parameter("milestones must be fractions in [0, 1]".into()));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Parameter("gamma must be positive".into()));
        }
        Ok(())
    }
}

/// Heavy-ball SGD: `v <- m v + g; w <- w - r v`.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(params: &ParamSet, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// Applies the accumulated gradients, then zeroes them. Nothing is
    /// modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(Error::Contract("optimizer built for a different parameter set".into()));
        }
        for name in params.names() {
            let g = params.grad(name).expect("name from the same set");
            if let Some(bad) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("gradient of `{name}` is non-finite at entry {bad}")));
            }
        }
        for (i, v) in self.velocity.iter_mut().enumerate() {
            let (w, g) = params.value_and_grad_mut(i);
            for ((vi, wi), gi) in v.data_mut().iter_mut().zip(w.data_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + gi;
                *wi -= self.lr * *vi;
            }
        }
        params.zero_grad();
        Ok(())
    }
}
