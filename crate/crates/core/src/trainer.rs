//! Few-shot episodes and the optimization loop over `(rho, P_v)`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::augment::{make_triplet, AugmentConfig};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{consistency_node, nt_xent_node, posterior_logits_node, total_loss, LossConfig, LossReport};
use crate::model::{Encoders, PromptModel, ViewFeatures};
use crate::optim::{clip_global_norm, global_norm, OptimConfig, SgdState};
use crate::params::Parameterized;
use crate::projectors::BatchStats;
use crate::promptlearner::prompt_embedding_node;
use crate::rng::{self, stream};
use crate::tensor::Tensor;

/// Samples per class: a count or every available sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shots {
    Count(usize),
    All,
}

impl fmt::Display for Shots {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shots::Count(n) => write!(f, "{n}"),
            Shots::All => f.write_str("all"),
        }
    }
}

impl Serialize for Shots {
    fn serialize<S: Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        match self {
            Shots::Count(n) => s.serialize_u64(*n as u64),
            Shots::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for Shots {
    fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Shots;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a positive integer or \"all\"")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> core::result::Result<Shots, E> {
                if v == 0 {
                    return Err(E::custom("shots must be positive"));
                }
                Ok(Shots::Count(v as usize))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> core::result::Result<Shots, E> {
                if v <= 0 {
                    return Err(E::custom("shots must be positive"));
                }
                Ok(Shots::Count(v as usize))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> core::result::Result<Shots, E> {
                if v.eq_ignore_ascii_case("all") {
                    return Ok(Shots::All);
                }
                v.parse::<usize>()
                    .ok()
                    .filter(|n| *n > 0)
                    .map(Shots::Count)
                    .ok_or_else(|| E::custom(format!("invalid shots value {v:?}")))
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub shots: Shots,
    /// One run per seed.
    pub seeds: Vec<u64>,
    pub optim: OptimConfig,
    /// Optional cap on the total number of optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 4,
            shots: Shots::Count(16),
            seeds: vec![1, 2, 3],
            optim: OptimConfig::default(),
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be at least 2".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("train.seeds is empty".into()));
        }
        self.optim.validate()
    }
}

/// Per-seed, per-class few-shot draw. `items` pairs sample ids with class
/// ids; the result lists the chosen ids in ascending order.
pub fn build_episode(items: &[(usize, usize)], seen: &[usize], shots: Shots, seed: u64) -> Result<Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(id, c) in items {
        by_class.entry(c).or_default().push(id);
    }
    let mut out = Vec::new();
    for &c in seen {
        let mut ids = by_class.remove(&c).unwrap_or_default();
        if ids.is_empty() {
            return Err(Error::Dataset(format!("class {c} has no training samples")));
        }
        ids.sort_unstable();
        ids.dedup();
        let take = match shots {
            Shots::All => ids.len(),
            Shots::Count(n) => {
                if ids.len() < n {
                    log::warn!("class {c} has {} samples, fewer than {n} shots; using all", ids.len());
                }
                n.min(ids.len())
            }
        };
        let mut r = rng::rng(rng::derive_path(seed, &[stream::EPISODE, c as u64]));
        ids.shuffle(&mut r);
        out.extend_from_slice(&ids[..take]);
    }
    out.sort_unstable();
    Ok(out)
}

/// One training sample; `label` indexes the seen label set.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub id: usize,
    pub label: usize,
    pub image: Image,
}

/// Seed-independent inputs of a run.
#[derive(Clone, Debug)]
pub struct TrainSetup {
    /// Token embeddings of each seen class, indexed by label.
    pub class_tokens: Vec<Tensor>,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub l_con: f64,
    pub l_ce: f64,
    pub l_sem: f64,
    pub l_total: f64,
    /// Running accuracy of the training-mode logits over the epoch.
    pub train_acc: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub sample_ids: Vec<usize>,
    pub report: LossReport,
    pub lr: f64,
    pub grad_norm: f64,
    pub correct: usize,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub model: PromptModel,
    pub sgd: SgdState,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub history: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn new(model: PromptModel, seed: u64) -> Self {
        Self {
            model,
            sgd: SgdState::default(),
            seed,
            epoch: 0,
            step: 0,
            history: Vec::new(),
        }
    }
}

/// Node handles of one training forward pass.
pub struct StepGraph {
    pub graph: Graph,
    pub rho_leaves: Vec<NodeId>,
    pub pv_leaves: Vec<NodeId>,
    /// Context tokens per branch (`x`, `x1`, `x2`) and sample, when built.
    pub context: [Vec<NodeId>; 3],
    pub l_con: Option<NodeId>,
    pub l_ce: Option<NodeId>,
    pub l_sem: Option<NodeId>,
    pub total: NodeId,
    pub logits: Option<NodeId>,
    pub stats: Option<BatchStats>,
}

/// Encoded views of a batch; `x1`/`x2` are empty when no loss needs them.
#[derive(Clone, Debug, Default)]
pub struct BatchViews {
    pub x: Vec<ViewFeatures>,
    pub x1: Vec<ViewFeatures>,
    pub x2: Vec<ViewFeatures>,
}

fn needs_x1(l: &LossConfig) -> bool {
    l.enable_con || (l.enable_sem && l.sem_use_x1)
}

fn needs_x2(l: &LossConfig) -> bool {
    l.enable_sem && l.sem_use_x2
}

/// Builds triplets for `batch` and encodes the views the losses need.
pub fn encode_batch(
    model: &PromptModel,
    enc: Encoders<'_>,
    batch: &[&TrainItem],
    aug: &AugmentConfig,
    loss: &LossConfig,
    run_seed: u64,
    epoch: usize,
) -> Result<BatchViews> {
    let mut v = BatchViews::default();
    for item in batch {
        let seed = rng::derive_path(run_seed, &[stream::AUGMENT, epoch as u64, item.id as u64]);
        let t = make_triplet(&item.image, seed, aug)?;
        v.x.push(model.view_features(enc.vision, &t.x)?);
        if needs_x1(loss) {
            v.x1.push(model.view_features(enc.vision, &t.x1)?);
        }
        if needs_x2(loss) {
            v.x2.push(model.view_features(enc.vision, &t.x2)?);
        }
    }
    Ok(v)
}

fn seed_rows(views: &[ViewFeatures]) -> Vec<&[f64]> {
    views.iter().map(|v| v.seed.0.as_slice()).collect()
}

fn pooled_rows(views: &[ViewFeatures]) -> Vec<&[f64]> {
    views.iter().map(|v| v.pooled.as_slice()).collect()
}

/// Training-mode forward of every enabled loss term.
pub fn forward_step(
    model: &PromptModel,
    enc: Encoders<'_>,
    views: &BatchViews,
    labels: &[usize],
    class_tokens: &[Tensor],
    loss: &LossConfig,
) -> Result<StepGraph> {
    loss.validate()?;
    let b = views.x.len();
    if b < 2 {
        return Err(Error::Validation("a training batch needs at least 2 samples".into()));
    }
    if labels.len() != b {
        return Err(Error::Validation("label count differs from batch size".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_tokens.len()) {
        return Err(Error::Protocol(format!(
            "label {bad} outside the {}-class seen label set",
            class_tokens.len()
        )));
    }
    let mut g = Graph::new();
    let rho_leaves = model.rho.bind(&mut g, true);
    let pv_leaves = model.pv.bind(&mut g, true);

    // branches that need generated prompts
    let mut branches: Vec<(usize, &[ViewFeatures])> = Vec::new();
    if loss.enable_ce || loss.enable_sem {
        branches.push((0, &views.x));
    }
    if loss.enable_sem && loss.sem_use_x1 {
        branches.push((1, &views.x1));
    }
    if loss.enable_sem && loss.sem_use_x2 {
        branches.push((2, &views.x2));
    }
    let mut context: [Vec<NodeId>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut prompts: [Vec<NodeId>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    if !branches.is_empty() {
        let mut rows = Vec::new();
        for (_, v) in &branches {
            if v.len() != b {
                return Err(Error::Validation("augmented views missing from batch".into()));
            }
            rows.extend(seed_rows(v));
        }
        let seeds = g.constant(Tensor::from_rows(&rows)?);
        let outs = model.rho.forward(&mut g, &rho_leaves, seeds);
        for (bi, (branch, _)) in branches.iter().enumerate() {
            for s in 0..b {
                let r = bi * b + s;
                let toks: Vec<NodeId> = outs.iter().map(|&o| g.slice_rows(o, r, 1)).collect();
                let ctx = g.concat_rows(&toks);
                let mut per_class = Vec::with_capacity(class_tokens.len());
                for t in class_tokens {
                    per_class.push(prompt_embedding_node(&mut g, enc.text, ctx, t)?);
                }
                let p = g.concat_rows(&per_class);
                context[*branch].push(ctx);
                prompts[*branch].push(p);
            }
        }
    }

    let mut terms = Vec::new();
    let (mut l_con, mut l_ce, mut l_sem, mut logits, mut stats) = (None, None, None, None, None);
    if loss.enable_ce || loss.enable_con {
        let mut rows = pooled_rows(&views.x);
        if loss.enable_con {
            rows.extend(pooled_rows(&views.x1));
        }
        let input = g.constant(Tensor::from_rows(&rows)?);
        let (z, st) = model.pv.forward_train(&mut g, &pv_leaves, input);
        stats = Some(st);
        let z_x = g.slice_rows(z, 0, b);
        if loss.enable_ce {
            let mut rows = Vec::with_capacity(b);
            for s in 0..b {
                let zi = g.slice_rows(z_x, s, 1);
                rows.push(posterior_logits_node(&mut g, zi, prompts[0][s], loss.temperature));
            }
            let lg = g.concat_rows(&rows);
            let ce = g.cross_entropy(lg, labels);
            logits = Some(lg);
            l_ce = Some(ce);
            terms.push(ce);
        }
        if loss.enable_con {
            let z_x1 = g.slice_rows(z, b, b);
            let con = nt_xent_node(&mut g, z_x, z_x1, loss.temperature)?;
            l_con = Some(con);
            terms.push(con);
        }
    }
    if loss.enable_sem {
        let s1 = loss.sem_use_x1.then_some(prompts[1].as_slice());
        let s2 = loss.sem_use_x2.then_some(prompts[2].as_slice());
        let sem = consistency_node(&mut g, &prompts[0], s1, s2)?;
        l_sem = Some(sem);
        terms.push(sem);
    }
    let total = g.sum_nodes(&terms);
    Ok(StepGraph {
        graph: g,
        rho_leaves,
        pv_leaves,
        context,
        l_con,
        l_ce,
        l_sem,
        total,
        logits,
        stats,
    })
}

/// Gradients of the step's total loss for every `(rho, P_v)` tensor, in
/// [`Parameterized::params`] order (rho first).
pub fn step_gradients(model: &PromptModel, sg: &StepGraph) -> Vec<Tensor> {
    let grads = sg.graph.backward(sg.total);
    let shapes: Vec<(usize, usize)> = model
        .rho
        .params()
        .iter()
        .chain(model.pv.params().iter())
        .map(|t| t.shape())
        .collect();
    sg.rho_leaves
        .iter()
        .chain(sg.pv_leaves.iter())
        .zip(shapes)
        .map(|(id, (r, c))| grads.get(*id).cloned().unwrap_or_else(|| Tensor::zeros(r, c)))
        .collect()
}

pub struct StepOutcome {
    pub report: LossReport,
    pub grad_norm: f64,
    pub correct: usize,
}

/// One optimizer step on `(rho, P_v)`.
pub fn train_step(
    state: &mut TrainState,
    enc: Encoders<'_>,
    setup: &TrainSetup,
    batch: &[&TrainItem],
    epoch: usize,
    lr: f64,
) -> Result<StepOutcome> {
    let views = encode_batch(&state.model, enc, batch, &setup.augment, &setup.loss, state.seed, epoch)?;
    let labels: Vec<usize> = batch.iter().map(|i| i.label).collect();
    let sg = forward_step(&state.model, enc, &views, &labels, &setup.class_tokens, &setup.loss)?;
    let val = |n: Option<NodeId>| n.map(|id| sg.graph.scalar(id)).unwrap_or(0.0);
    let report = total_loss(&setup.loss, val(sg.l_con), val(sg.l_ce), val(sg.l_sem), batch.len()).map_err(|e| {
        if let Error::NonFinite { l_con, l_ce, l_sem } = e {
            log::error!("non-finite loss at step {}: l_con={l_con} l_ce={l_ce} l_sem={l_sem}", state.step);
        }
        e
    })?;
    let correct = match sg.logits {
        Some(lg) => {
            let v = sg.graph.value(lg);
            (0..v.rows())
                .filter(|&r| argmax(v.row(r)) == labels[r])
                .count()
        }
        None => 0,
    };
    let mut grads = step_gradients(&state.model, &sg);
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient at step {}", state.step)));
    }
    let grad_norm = match setup.train.optim.clip_norm {
        Some(c) => clip_global_norm(&mut grads, c),
        None => global_norm(&grads),
    };
    let stats = sg.stats;
    {
        let model = &mut state.model;
        let mut params = model.rho.params_mut();
        params.extend(model.pv.params_mut());
        state.sgd.step(&mut params, &grads, lr, &setup.train.optim)?;
    }
    if let Some(st) = stats {
        state.model.pv.update_running(&st);
    }
    state.step += 1;
    Ok(StepOutcome {
        report,
        grad_norm,
        correct,
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Batches of one epoch: a seeded shuffle of item positions, with a final
/// batch shorter than 2 dropped.
pub fn epoch_batches(n_items: usize, batch_size: usize, run_seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut r = rng::rng(rng::derive_path(run_seed, &[stream::ORDER, epoch as u64]));
    order.shuffle(&mut r);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

pub fn steps_per_epoch(n_items: usize, batch_size: usize) -> usize {
    let full = n_items / batch_size;
    full + usize::from(n_items % batch_size >= 2)
}

/// Runs the next epoch. `on_step` sees every step record.
pub fn train_epoch(
    state: &mut TrainState,
    enc: Encoders<'_>,
    setup: &TrainSetup,
    items: &[TrainItem],
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<EpochMetrics> {
    let cfg = &setup.train;
    let spe = steps_per_epoch(items.len(), cfg.batch_size);
    if spe == 0 {
        return Err(Error::Dataset(format!(
            "{} training item(s) cannot form a batch of at least 2",
            items.len()
        )));
    }
    let mut total_steps = spe * cfg.epochs;
    if let Some(m) = cfg.max_steps {
        total_steps = total_steps.min(m);
    }
    let epoch = state.epoch;
    let frozen = enc.checksum();
    let mut sums = [0.0f64; 4];
    let (mut correct, mut seen, mut steps, mut lr) = (0usize, 0usize, 0usize, 0.0);
    for batch_idx in epoch_batches(items.len(), cfg.batch_size, state.seed, epoch) {
        if state.step >= total_steps {
            break;
        }
        lr = cfg.optim.lr_at(state.step, spe, total_steps);
        let batch: Vec<&TrainItem> = batch_idx.iter().map(|&i| &items[i]).collect();
        let out = train_step(state, enc, setup, &batch, epoch, lr)?;
        let r = &out.report;
        sums[0] += r.l_con;
        sums[1] += r.l_ce;
        sums[2] += r.l_sem;
        sums[3] += r.l_total;
        correct += out.correct;
        seen += batch.len();
        steps += 1;
        on_step(&StepRecord {
            epoch,
            step: state.step - 1,
            sample_ids: batch.iter().map(|i| i.id).collect(),
            report: out.report,
            lr,
            grad_norm: out.grad_norm,
            correct: out.correct,
        });
    }
    if enc.checksum() != frozen {
        return Err(Error::Validation("frozen encoder weights changed during training".into()));
    }
    let d = steps.max(1) as f64;
    let m = EpochMetrics {
        epoch,
        steps,
        l_con: sums[0] / d,
        l_ce: sums[1] / d,
        l_sem: sums[2] / d,
        l_total: sums[3] / d,
        train_acc: if setup.loss.enable_ce && seen > 0 { correct as f64 / seen as f64 } else { 0.0 },
        lr,
    };
    state.epoch += 1;
    state.history.push(m.clone());
    Ok(m)
}

/// Runs the remaining epochs of `state`.
pub fn train_run(
    state: &mut TrainState,
    enc: Encoders<'_>,
    setup: &TrainSetup,
    items: &[TrainItem],
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<()> {
    setup.train.validate()?;
    setup.loss.validate()?;
    setup.augment.validate()?;
    while state.epoch < setup.train.epochs {
        if let Some(m) = setup.train.max_steps {
            if state.step >= m {
                break;
            }
        }
        train_epoch(state, enc, setup, items, on_step)?;
    }
    Ok(())
}

/// Labels each seen class by its position in `seen`.
pub fn label_map(seen: &[usize]) -> BTreeMap<usize, usize> {
    seen.iter().enumerate().map(|(i, &c)| (c, i)).collect()
}

/// Human-readable one-line summary of a loss report.
pub fn summarize(r: &LossReport) -> String {
    format!(
        "l_total={:.4} l_ce={:.4} l_sem={:.4} l_con={:.4}",
        r.l_total, r.l_ce, r.l_sem, r.l_con
    )
}
