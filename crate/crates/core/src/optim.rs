//! SGD with Nesterov momentum, L2 weight decay and step learning rates.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Initial learning rate multiplied by `factor` at each `(epoch, factor)`
/// milestone once training reaches that epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default)]
    pub milestones: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule { initial: lr, milestones: Vec::new() }
    }

    pub fn at_epoch(&self, epoch: usize) -> f64 {
        self.milestones.iter().filter(|(e, _)| epoch >= *e).fold(self.initial, |lr, (_, f)| lr * f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { lr: LrSchedule::constant(0.1), momentum: 0.9, weight_decay: 1e-4 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.initial > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return domain(format!("invalid optimizer settings {self:?}"));
        }
        Ok(())
    }
}

/// One parameter tensor, flattened, with its gradient.
pub struct ParamSlot<'a> {
    pub value: &'a mut [f64],
    pub grad: &'a [f64],
    /// Whether weight decay applies (weights yes, biases no).
    pub decay: bool,
}

/// Optimizer state; velocity buffers mirror the parameter slots in order.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub config: SgdConfig,
    pub velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(config: SgdConfig) -> Self {
        SgdState { config, velocity: Vec::new() }
    }

    /// `g' = g + wd * theta` (decayed slots only), then
    /// `v <- mu v - lr g'` and `theta <- theta + mu v - lr g'`.
    pub fn step(&mut self, lr: f64, params: &mut [ParamSlot<'_>]) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        }
        assert_eq!(self.velocity.len(), params.len(), "parameter layout changed between steps");
        let mu = self.config.momentum;
        let wd = self.config.weight_decay;
        for (slot, vel) in params.iter_mut().zip(self.velocity.iter_mut()) {
            assert_eq!(vel.len(), slot.value.len(), "parameter layout changed between steps");
            for ((theta, &g), v) in slot.value.iter_mut().zip(slot.grad).zip(vel.iter_mut()) {
                let g = if slot.decay { g + wd * *theta } else { g };
                *v = mu * *v - lr * g;
                *theta += mu * *v - lr * g;
            }
        }
    }
}
