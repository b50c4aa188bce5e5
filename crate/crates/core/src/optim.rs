//! LARS and momentum SGD, plus the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Lars,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub global_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lars_eta: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { kind: OptimizerKind::Lars, global_lr: 0.4, momentum: 0.9, weight_decay: 1e-5, lars_eta: 0.02, eps: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.global_lr > 0.0 && self.global_lr.is_finite()) {
            return Err(Error::config("optimizer.global_lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("optimizer.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("optimizer.weight_decay", "must be non-negative"));
        }
        if !(self.lars_eta > 0.0 && self.lars_eta.is_finite()) {
            return Err(Error::config("optimizer.lars_eta", "must be positive"));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::config("optimizer.eps", "must be non-negative"));
        }
        Ok(())
    }
}

/// LARS trust ratio `η‖w‖ / (‖∇‖ + λ‖w‖ + ε)`, or 1 when either norm is 0.
pub fn lars_local_lr(w_norm: f64, g_norm: f64, cfg: &OptimizerConfig) -> f64 {
    if w_norm > 0.0 && g_norm > 0.0 {
        cfg.lars_eta * w_norm / (g_norm + cfg.weight_decay * w_norm + cfg.eps)
    } else {
        1.0
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct Optimizer {
    pub cfg: OptimizerConfig,
    velocity: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizer { cfg, velocity: Vec::new() })
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    /// One update at learning rate `lr` (the scheduled global rate). Rank-1
    /// tensors are biases: they skip trust scaling and weight decay. Any
    /// non-finite gradient aborts before a parameter is touched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(shape_err!("{} params but {} gradients", params.len(), grads.len()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(shape_err!("param {i}: shape {:?} vs gradient {:?}", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for parameter {i}")));
            }
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        let c = &self.cfg;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            let is_bias = p.rank() <= 1;
            let wd = if is_bias { 0.0 } else { c.weight_decay };
            let scale = match c.kind {
                OptimizerKind::Sgd => lr,
                OptimizerKind::Lars if is_bias => lr,
                OptimizerKind::Lars => lr * lars_local_lr(p.norm(), g.norm(), c),
            };
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = c.momentum * *vi + scale * (gi + wd * *w);
                *w -= *vi;
            }
        }
        Ok(())
    }
}

/// `base · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}
