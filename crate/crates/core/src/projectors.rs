//! The vision projector: one affine map followed by batch normalization.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{shape_err, Result};
use crate::params::Parameterized;
use crate::rng::{self, stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PvConfig {
    /// Joint width; must equal the text encoder's output width. `None` adopts it.
    pub d_joint: Option<usize>,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for PvConfig {
    fn default() -> Self {
        Self {
            d_joint: None,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics recorded by a train-mode forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisionProjector {
    weight: Tensor,
    bias: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    stats_ready: bool,
    momentum: f64,
    eps: f64,
}

impl VisionProjector {
    pub fn new(input_dim: usize, d_joint: usize, cfg: &PvConfig, seed: u64) -> Self {
        let mut r = rng::rng(rng::derive(seed, stream::PROJECTOR));
        Self {
            weight: Tensor::randn(input_dim, d_joint, 1.0 / libm::sqrt(input_dim as f64), &mut r),
            bias: Tensor::zeros(1, d_joint),
            gamma: Tensor::filled(1, d_joint, 1.0),
            beta: Tensor::zeros(1, d_joint),
            running_mean: vec![0.0; d_joint],
            running_var: vec![1.0; d_joint],
            stats_ready: false,
            momentum: cfg.bn_momentum,
            eps: cfg.bn_epsilon,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_joint(&self) -> usize {
        self.weight.cols()
    }

    pub fn running_stats(&self) -> (&[f64], &[f64], bool) {
        (&self.running_mean, &self.running_var, self.stats_ready)
    }

    pub fn set_running_stats(&mut self, mean: Vec<f64>, var: Vec<f64>, ready: bool) {
        self.running_mean = mean;
        self.running_var = var;
        self.stats_ready = ready;
    }

    /// Train-mode graph forward over a `B x input_dim` node.
    pub fn forward_train(&self, g: &mut Graph, leaves: &[NodeId], x: NodeId) -> (NodeId, BatchStats) {
        let y = g.matmul(x, leaves[0]);
        let y = g.add_row(y, leaves[1]);
        let (xhat, mean, var) = g.batch_norm(y, self.eps);
        let y = g.mul_row(xhat, leaves[2]);
        let y = g.add_row(y, leaves[3]);
        (y, BatchStats { mean, var })
    }

    /// Exponential update of the running statistics.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
        self.stats_ready = true;
    }

    /// Eval-mode projection of one visual feature.
    pub fn project_eval(&self, feature: &[f64]) -> Result<Vec<f64>> {
        if feature.len() != self.input_dim() {
            return Err(shape_err("project", self.input_dim(), feature.len()));
        }
        if !self.stats_ready {
            log::warn!("vision projector evaluated before any training batch; using identity statistics");
        }
        let (mean, var) = if self.stats_ready {
            (self.running_mean.as_slice(), self.running_var.as_slice())
        } else {
            (&[][..], &[][..])
        };
        let d = self.d_joint();
        let mut out = vec![0.0; d];
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = self.bias.get(0, j);
            for (i, f) in feature.iter().enumerate() {
                acc += f * self.weight.get(i, j);
            }
            let (mu, v) = if self.stats_ready { (mean[j], var[j]) } else { (0.0, 1.0) };
            *o = (acc - mu) / libm::sqrt(v + self.eps) * self.gamma.get(0, j) + self.beta.get(0, j);
        }
        Ok(out)
    }

    /// Projects a `B x input_dim` batch. Train mode normalizes with the batch
    /// statistics and folds them into the running estimates.
    pub fn project(&mut self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        if batch.cols() != self.input_dim() {
            return Err(shape_err("project", self.input_dim(), batch.cols()));
        }
        match mode {
            Mode::Eval => {
                let mut out = Tensor::zeros(batch.rows(), self.d_joint());
                for r in 0..batch.rows() {
                    let p = self.project_eval(batch.row(r))?;
                    out.row_mut(r).copy_from_slice(&p);
                }
                Ok(out)
            }
            Mode::Train => {
                let mut g = Graph::new();
                let leaves = self.bind(&mut g, false);
                let x = g.constant(batch.clone());
                let (y, stats) = self.forward_train(&mut g, &leaves, x);
                let out = g.value(y).clone();
                self.update_running(&stats);
                Ok(out)
            }
        }
    }
}

impl Parameterized for VisionProjector {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias, &self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias, &mut self.gamma, &mut self.beta]
    }

    fn param_names(&self) -> Vec<String> {
        ["pv.weight", "pv.bias", "pv.gamma", "pv.beta"]
            .iter()
            .map(|s| String::from(*s))
            .collect()
    }
}
