//! SGD with momentum, global-norm clipping and a warmup + cosine schedule.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub warmup_epochs: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            momentum: 0.9,
            weight_decay: 0.0,
            schedule: Schedule::Cosine,
            warmup_epochs: 1,
            clip_norm: Some(5.0),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("optim.lr must be a finite value >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("optim.momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("optim.weight_decay must be >= 0".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("optim.clip_norm must be positive".into()));
            }
        }
        Ok(())
    }

    /// Learning rate at 0-based `step`: linear warmup over the first
    /// `warmup_epochs` epochs, then cosine decay to zero at `total_steps`.
    pub fn lr_at(&self, step: usize, steps_per_epoch: usize, total_steps: usize) -> f64 {
        let warm = self.warmup_epochs * steps_per_epoch;
        if step < warm {
            return self.lr * (step + 1) as f64 / warm as f64;
        }
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let span = total_steps.saturating_sub(warm).max(1);
                let t = ((step - warm) as f64 / span as f64).min(1.0);
                0.5 * self.lr * (1.0 + libm::cos(core::f64::consts::PI * t))
            }
        }
    }
}

/// Global L2 norm of `grads`.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    libm::sqrt(grads.iter().map(|g| g.sq_norm()).sum::<f64>())
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let n = global_norm(grads);
    if n > max_norm {
        let s = max_norm / n;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    n
}

/// Momentum buffers, one per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    pub buffers: Vec<Tensor>,
}

impl SgdState {
    /// `buf = mu * buf + (g + wd * p)`; `p -= lr * buf`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64, cfg: &OptimConfig) -> Result<()> {
        if params.len() != grads.len() {
            return Err(shape_err("sgd step", params.len(), grads.len()));
        }
        if self.buffers.is_empty() {
            self.buffers = grads.iter().map(|g| Tensor::zeros(g.rows(), g.cols())).collect();
        }
        if self.buffers.len() != grads.len() {
            return Err(shape_err("sgd momentum buffers", grads.len(), self.buffers.len()));
        }
        for ((p, g), buf) in params.iter_mut().zip(grads).zip(self.buffers.iter_mut()) {
            if p.shape() != g.shape() {
                return Err(shape_err("sgd step", format_shape(p.shape()), format_shape(g.shape())));
            }
            for ((pv, gv), bv) in p.data_mut().iter_mut().zip(g.data()).zip(buf.data_mut()) {
                let d = gv + cfg.weight_decay * *pv;
                *bv = cfg.momentum * *bv + d;
                *pv -= lr * *bv;
            }
        }
        Ok(())
    }
}

fn format_shape(s: (usize, usize)) -> alloc::string::String {
    alloc::format!("{}x{}", s.0, s.1)
}
