//! Training objectives.
//!
//! * `nt_xent`: symmetric normalized temperature-scaled cross-entropy over the
//!   `2B` projected views of `(x, x1)`.
//! * `class_posterior` / `cross_entropy_loss`: softmax over cosine similarity
//!   between the projected image and each class prompt embedding, divided by
//!   the temperature; mean negative log-likelihood of the true class.
//! * `prompt_consistency_loss`: L2 distance between the teacher prompt
//!   embeddings of `x` (no gradient) and the student embeddings of `x1`/`x2`,
//!   averaged over samples and classes.
//!
//! Each objective has a graph form used by training and a value form built on
//! the same graph code.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, Graph, NodeId};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

const ZERO_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub enable_con: bool,
    pub enable_ce: bool,
    pub enable_sem: bool,
    pub sem_use_x1: bool,
    pub sem_use_x2: bool,
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            enable_con: true,
            enable_ce: true,
            enable_sem: true,
            sem_use_x1: true,
            sem_use_x2: true,
            temperature: 0.07,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.enable_con || self.enable_ce || self.enable_sem) {
            return Err(Error::Config("every loss term is disabled".into()));
        }
        if self.enable_sem && !(self.sem_use_x1 || self.sem_use_x2) {
            return Err(Error::Config(
                "loss.enable_sem needs at least one of sem_use_x1 / sem_use_x2".into(),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("loss.temperature must be positive".into()));
        }
        Ok(())
    }

    /// Short label such as `ce+sem(x1+x2)+con`.
    pub fn label(&self) -> alloc::string::String {
        let mut parts = Vec::new();
        if self.enable_ce {
            parts.push(alloc::string::String::from("ce"));
        }
        if self.enable_sem {
            let v = match (self.sem_use_x1, self.sem_use_x2) {
                (true, true) => "x1+x2",
                (true, false) => "x1",
                _ => "x2",
            };
            parts.push(format!("sem({v})"));
        }
        if self.enable_con {
            parts.push(alloc::string::String::from("con"));
        }
        parts.join("+")
    }
}

/// Per-step loss values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_con: f64,
    pub l_ce: f64,
    pub l_sem: f64,
    pub l_total: f64,
    pub enable_con: bool,
    pub enable_ce: bool,
    pub enable_sem: bool,
    pub batch_size: usize,
    pub temperature: f64,
}

/// Class probabilities for one image over the candidate label set.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorRow {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl PosteriorRow {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let lse = log_sum_exp(&logits);
        let probs = logits.iter().map(|l| libm::exp(l - lse)).collect();
        Self { logits, probs }
    }

    /// Most probable class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &l) in self.logits.iter().enumerate() {
            if l > self.logits[best] {
                best = i;
            }
        }
        best
    }
}

fn check_nonzero_rows(t: &Tensor, what: &str) -> Result<()> {
    for r in 0..t.rows() {
        let n = libm::sqrt(t.row(r).iter().map(|v| v * v).sum::<f64>());
        if n <= ZERO_NORM {
            return Err(Error::Numerical(format!("zero-norm {what} embedding at row {r}")));
        }
    }
    Ok(())
}

/// Graph NT-Xent; both inputs are `B x D` nodes.
pub fn nt_xent_node(g: &mut Graph, z_x: NodeId, z_x1: NodeId, temperature: f64) -> Result<NodeId> {
    let (b, d) = g.value(z_x).shape();
    if g.value(z_x1).shape() != (b, d) {
        return Err(shape_err("nt_xent", format!("{b}x{d}"), format!("{:?}", g.value(z_x1).shape())));
    }
    if b < 2 {
        return Err(Error::Validation("nt_xent needs a batch of at least 2".into()));
    }
    let z = g.concat_rows(&[z_x, z_x1]);
    let z = g.normalize_rows(z);
    let sim = g.matmul_bt(z, z);
    let sim = g.scale(sim, 1.0 / temperature);
    let sim = g.mask_diagonal(sim);
    let targets: Vec<usize> = (0..2 * b).map(|i| (i + b) % (2 * b)).collect();
    Ok(g.cross_entropy(sim, &targets))
}

pub fn nt_xent(z_x: &Tensor, z_x1: &Tensor, temperature: f64) -> Result<f64> {
    check_nonzero_rows(z_x, "view")?;
    check_nonzero_rows(z_x1, "view")?;
    let mut g = Graph::new();
    let a = g.constant(z_x.clone());
    let b = g.constant(z_x1.clone());
    let l = nt_xent_node(&mut g, a, b, temperature)?;
    Ok(g.scalar(l))
}

/// `1 x K` cosine logits divided by the temperature.
pub fn posterior_logits_node(g: &mut Graph, z_img: NodeId, prompts: NodeId, temperature: f64) -> NodeId {
    let zi = g.normalize_rows(z_img);
    let zp = g.normalize_rows(prompts);
    let s = g.matmul_bt(zi, zp);
    g.scale(s, 1.0 / temperature)
}

pub fn class_posterior(z_img: &[f64], prompt_embeds: &Tensor, temperature: f64) -> Result<PosteriorRow> {
    if prompt_embeds.rows() < 2 {
        return Err(Error::Validation("posterior needs at least 2 candidate classes".into()));
    }
    if prompt_embeds.cols() != z_img.len() {
        return Err(shape_err("class_posterior", z_img.len(), prompt_embeds.cols()));
    }
    let zi = Tensor::row_vector(z_img.to_vec());
    check_nonzero_rows(&zi, "image")?;
    check_nonzero_rows(prompt_embeds, "prompt")?;
    let mut g = Graph::new();
    let a = g.constant(zi);
    let p = g.constant(prompt_embeds.clone());
    let l = posterior_logits_node(&mut g, a, p, temperature);
    Ok(PosteriorRow::from_logits(g.value(l).data().to_vec()))
}

pub fn cross_entropy_loss(posteriors: &[PosteriorRow], labels: &[usize]) -> Result<f64> {
    if posteriors.len() != labels.len() || posteriors.is_empty() {
        return Err(shape_err("cross_entropy_loss", posteriors.len(), labels.len()));
    }
    let mut total = 0.0;
    for (row, &y) in posteriors.iter().zip(labels) {
        if y >= row.probs.len() {
            return Err(Error::Protocol(format!(
                "label {y} outside the {}-class seen label set",
                row.probs.len()
            )));
        }
        total -= row.logits[y] - log_sum_exp(&row.logits);
    }
    Ok(total / labels.len() as f64)
}

/// Graph consistency loss. Each slice entry is a `K x D` node of prompt
/// embeddings for one sample; the teacher entries are detached here.
pub fn consistency_node(
    g: &mut Graph,
    teacher: &[NodeId],
    student_x1: Option<&[NodeId]>,
    student_x2: Option<&[NodeId]>,
) -> Result<NodeId> {
    let students: Vec<&[NodeId]> = [student_x1, student_x2].into_iter().flatten().collect();
    if students.is_empty() || teacher.is_empty() {
        return Err(Error::Config("consistency loss needs a teacher and a student branch".into()));
    }
    let mut per_view = Vec::new();
    for s in &students {
        if s.len() != teacher.len() {
            return Err(shape_err("prompt_consistency_loss", teacher.len(), s.len()));
        }
        let mut norms = Vec::with_capacity(teacher.len());
        for (&t, &st) in teacher.iter().zip(s.iter()) {
            if g.value(t).shape() != g.value(st).shape() {
                return Err(Error::Validation(format!(
                    "class alignment mismatch: teacher {:?} vs student {:?}",
                    g.value(t).shape(),
                    g.value(st).shape()
                )));
            }
            let td = g.detach(t);
            let d = g.sub(td, st);
            norms.push(g.row_norms(d));
        }
        per_view.push(g.concat_rows(&norms));
    }
    let sum = g.sum_nodes(&per_view);
    Ok(g.mean_all(sum))
}

pub fn prompt_consistency_loss(
    e_x: &[Tensor],
    e_x1: Option<&[Tensor]>,
    e_x2: Option<&[Tensor]>,
) -> Result<f64> {
    let mut g = Graph::new();
    let mut put = |set: &[Tensor]| set.iter().map(|t| g.constant(t.clone())).collect::<Vec<_>>();
    let t = put(e_x);
    let s1 = e_x1.map(&mut put);
    let s2 = e_x2.map(&mut put);
    let l = consistency_node(&mut g, &t, s1.as_deref(), s2.as_deref())?;
    Ok(g.scalar(l))
}

/// Unweighted sum of the enabled terms; disabled terms are reported as 0.
pub fn total_loss(cfg: &LossConfig, l_con: f64, l_ce: f64, l_sem: f64, batch_size: usize) -> Result<LossReport> {
    cfg.validate()?;
    let pick = |on: bool, v: f64| if on { v } else { 0.0 };
    let (l_con, l_ce, l_sem) = (pick(cfg.enable_con, l_con), pick(cfg.enable_ce, l_ce), pick(cfg.enable_sem, l_sem));
    let l_total = l_con + l_ce + l_sem;
    if !l_total.is_finite() || !(l_con.is_finite() && l_ce.is_finite() && l_sem.is_finite()) {
        return Err(Error::NonFinite { l_con, l_ce, l_sem });
    }
    Ok(LossReport {
        l_con,
        l_ce,
        l_sem,
        l_total,
        enable_con: cfg.enable_con,
        enable_ce: cfg.enable_ce,
        enable_sem: cfg.enable_sem,
        batch_size,
        temperature: cfg.temperature,
    })
}
