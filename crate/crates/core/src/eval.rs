//! Prediction, accuracy and harmonic-mean reporting for the three protocols.
//! Accuracies are percentages.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{Encoders, PromptModel};
use crate::protocol::{ProtocolKind, ProtocolSplit};
use crate::tensor::Tensor;

/// `2bn / (b + n)` for accuracies in `[0, 100]`; 0 when both are 0.
pub fn harmonic_mean(base: f64, new: f64) -> Result<f64> {
    for v in [base, new] {
        if !(0.0..=100.0).contains(&v) {
            return Err(Error::Validation(format!("accuracy {v} outside [0, 100]")));
        }
    }
    if base + new == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * base * new / (base + new))
}

/// Index of the largest logit; ties go to the lowest index.
pub fn predict(logits: &[f64]) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::Validation("label set is empty".into()));
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::Numerical("NaN logit".into()));
    }
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    let ties = logits.iter().filter(|&&v| v == logits[best]).count();
    if ties > 1 {
        log::debug!("{ties} classes tie at the top logit; choosing index {best}");
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample {
    pub id: usize,
    /// Class id in the owning dataset's label space.
    pub class: usize,
    pub image: Image,
}

/// Test samples of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPool {
    pub name: String,
    pub class_names: Vec<String>,
    pub samples: Vec<EvalSample>,
}

/// Scores one sample against a candidate label set given by class names.
pub trait Classifier {
    fn logits(&mut self, sample: &EvalSample, candidates: &[String]) -> Result<Vec<f64>>;
}

/// The trained model as a classifier; class tokens are cached per name.
pub struct PromptClassifier<'a> {
    pub model: &'a PromptModel,
    pub enc: Encoders<'a>,
    pub temperature: f64,
    cache: BTreeMap<String, Tensor>,
}

impl<'a> PromptClassifier<'a> {
    pub fn new(model: &'a PromptModel, enc: Encoders<'a>, temperature: f64) -> Self {
        Self {
            model,
            enc,
            temperature,
            cache: BTreeMap::new(),
        }
    }
}

impl Classifier for PromptClassifier<'_> {
    fn logits(&mut self, sample: &EvalSample, candidates: &[String]) -> Result<Vec<f64>> {
        let mut toks = Vec::with_capacity(candidates.len());
        for c in candidates {
            if !self.cache.contains_key(c) {
                let t = crate::backbone::embed_class_name(self.enc.text, c)?;
                self.cache.insert(c.clone(), t);
            }
            toks.push(self.cache[c].clone());
        }
        Ok(self
            .model
            .posterior(self.enc, &sample.image, &toks, self.temperature)?
            .logits)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub name: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub correct: usize,
    pub total: usize,
    pub top1: f64,
    pub per_class: Vec<ClassAccuracy>,
}

fn pct(c: usize, t: usize) -> f64 {
    if t == 0 {
        0.0
    } else {
        100.0 * c as f64 / t as f64
    }
}

/// Accuracy of `clf` over `(sample, label)` pairs, where `label` indexes
/// `candidates` and `classes[label]` is the reported class id.
pub fn evaluate(
    clf: &mut dyn Classifier,
    samples: &[(&EvalSample, usize)],
    candidates: &[String],
    classes: &[usize],
) -> Result<AccuracyReport> {
    if candidates.is_empty() || candidates.len() != classes.len() {
        return Err(Error::Validation("candidate names and class ids differ in length".into()));
    }
    let mut counts = alloc::vec![(0usize, 0usize); candidates.len()];
    for (s, label) in samples {
        if *label >= candidates.len() {
            return Err(Error::Protocol(format!("label {label} outside the candidate set")));
        }
        let logits = clf.logits(s, candidates)?;
        if logits.len() != candidates.len() {
            return Err(Error::Validation("classifier returned the wrong number of logits".into()));
        }
        let p = predict(&logits)?;
        counts[*label].1 += 1;
        if p == *label {
            counts[*label].0 += 1;
        }
    }
    let per_class = counts
        .iter()
        .enumerate()
        .map(|(i, &(c, t))| ClassAccuracy {
            class: classes[i],
            name: candidates[i].clone(),
            correct: c,
            total: t,
            accuracy: pct(c, t),
        })
        .collect();
    let correct = counts.iter().map(|c| c.0).sum();
    let total = samples.len();
    Ok(AccuracyReport {
        correct,
        total,
        top1: pct(correct, total),
        per_class,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub protocol: ProtocolKind,
    pub dataset: String,
    /// Base-to-new: pooled accuracy over the base and new evaluations.
    pub top1: f64,
    pub per_class: Vec<ClassAccuracy>,
    pub base_acc: Option<f64>,
    pub new_acc: Option<f64>,
    pub harmonic_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub protocol: ProtocolKind,
    /// Source evaluation first, then one entry per target.
    pub results: Vec<EvalResult>,
    /// Equal-weight mean of the target top-1 accuracies.
    pub target_macro_top1: Option<f64>,
}

fn subset<'a>(pool: &'a EvalPool, classes: &[usize], labels: &[usize]) -> Vec<(&'a EvalSample, usize)> {
    let map: BTreeMap<usize, usize> = classes.iter().copied().zip(labels.iter().copied()).collect();
    pool.samples
        .iter()
        .filter_map(|s| map.get(&s.class).map(|&l| (s, l)))
        .collect()
}

fn names(pool: &EvalPool, classes: &[usize]) -> Result<Vec<String>> {
    classes
        .iter()
        .map(|&c| {
            pool.class_names
                .get(c)
                .cloned()
                .ok_or_else(|| Error::Protocol(format!("class {c} missing from {}", pool.name)))
        })
        .collect()
}

fn plain(kind: ProtocolKind, pool: &EvalPool, r: AccuracyReport) -> EvalResult {
    EvalResult {
        protocol: kind,
        dataset: pool.name.clone(),
        top1: r.top1,
        per_class: r.per_class,
        base_acc: None,
        new_acc: None,
        harmonic_mean: None,
    }
}

/// Evaluates `clf` under `split`. `pools[0]` is the source test set and
/// `pools[t]` the test set of dataset `t`.
pub fn run_protocol(split: &ProtocolSplit, pools: &[EvalPool], clf: &mut dyn Classifier) -> Result<ProtocolResult> {
    let source = pools
        .first()
        .ok_or_else(|| Error::Protocol("no evaluation pools".into()))?;
    match split.kind {
        ProtocolKind::BaseToNew => {
            let seen_names = names(source, &split.seen)?;
            let unseen_names = names(source, &split.unseen)?;
            let seen_labels: Vec<usize> = (0..split.seen.len()).collect();
            let unseen_labels: Vec<usize> = (0..split.unseen.len()).collect();
            let base = evaluate(clf, &subset(source, &split.seen, &seen_labels), &seen_names, &split.seen)?;
            let new = evaluate(clf, &subset(source, &split.unseen, &unseen_labels), &unseen_names, &split.unseen)?;
            let hm = harmonic_mean(base.top1, new.top1)?;
            let mut per_class = base.per_class;
            per_class.extend(new.per_class);
            per_class.sort_by_key(|c| c.class);
            Ok(ProtocolResult {
                protocol: split.kind,
                results: alloc::vec![EvalResult {
                    protocol: split.kind,
                    dataset: source.name.clone(),
                    top1: pct(base.correct + new.correct, base.total + new.total),
                    per_class,
                    base_acc: Some(base.top1),
                    new_acc: Some(new.top1),
                    harmonic_mean: Some(hm),
                }],
                target_macro_top1: None,
            })
        }
        ProtocolKind::CrossDataset | ProtocolKind::DomainGeneralization => {
            let seen_names = names(source, &split.seen)?;
            let labels: Vec<usize> = (0..split.seen.len()).collect();
            let src = evaluate(clf, &subset(source, &split.seen, &labels), &seen_names, &split.seen)?;
            let mut results = alloc::vec![plain(split.kind, source, src)];
            for t in &split.targets {
                let pool = pools
                    .get(t.dataset)
                    .ok_or_else(|| Error::Protocol(format!("no evaluation pool for dataset {}", t.dataset)))?;
                let report = match &t.as_seen {
                    Some(as_seen) => {
                        // target samples are scored against the shared label set
                        let samples = subset(pool, &t.classes, as_seen);
                        evaluate(clf, &samples, &seen_names, &split.seen)?
                    }
                    None => {
                        let tn = names(pool, &t.classes)?;
                        let l: Vec<usize> = (0..t.classes.len()).collect();
                        evaluate(clf, &subset(pool, &t.classes, &l), &tn, &t.classes)?
                    }
                };
                results.push(plain(split.kind, pool, report));
            }
            let targets = &results[1..];
            let macro_top1 = targets.iter().map(|r| r.top1).sum::<f64>() / targets.len().max(1) as f64;
            Ok(ProtocolResult {
                protocol: split.kind,
                results,
                target_macro_top1: Some(macro_top1),
            })
        }
    }
}

/// Both readings of an averaged harmonic mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AveragedHm {
    pub base_mean: f64,
    pub new_mean: f64,
    /// Mean of the individual harmonic means.
    pub mean_of_hm: f64,
    /// Harmonic mean of the mean accuracies.
    pub hm_of_means: f64,
}

pub fn average_hm(pairs: &[(f64, f64)]) -> Result<AveragedHm> {
    if pairs.is_empty() {
        return Err(Error::Validation("nothing to average".into()));
    }
    let n = pairs.len() as f64;
    let base_mean = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let new_mean = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut hs = 0.0;
    for &(b, nw) in pairs {
        hs += harmonic_mean(b, nw)?;
    }
    Ok(AveragedHm {
        base_mean,
        new_mean,
        mean_of_hm: hs / n,
        hm_of_means: harmonic_mean(base_mean, new_mean)?,
    })
}

/// Mean over seeds; per-seed values are retained by the caller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub runs: usize,
    /// Mean top-1 per dataset, in result order.
    pub top1_mean: Vec<(String, f64)>,
    pub target_macro_top1_mean: Option<f64>,
    pub b2n: Option<AveragedHm>,
}

pub fn summarize_seeds(runs: &[ProtocolResult]) -> Result<SeedSummary> {
    let first = runs
        .first()
        .ok_or_else(|| Error::Validation("no runs to summarize".into()))?;
    let n = runs.len() as f64;
    let mut top1_mean = Vec::new();
    for (i, r) in first.results.iter().enumerate() {
        let mut s = 0.0;
        for run in runs {
            let e = run
                .results
                .get(i)
                .ok_or_else(|| Error::Validation("runs disagree on their dataset list".into()))?;
            s += e.top1;
        }
        top1_mean.push((r.dataset.clone(), s / n));
    }
    let target_macro_top1_mean = first
        .target_macro_top1
        .map(|_| runs.iter().filter_map(|r| r.target_macro_top1).sum::<f64>() / n);
    let b2n = if first.protocol == ProtocolKind::BaseToNew {
        let pairs: Vec<(f64, f64)> = runs
            .iter()
            .filter_map(|r| r.results.first())
            .filter_map(|e| Some((e.base_acc?, e.new_acc?)))
            .collect();
        Some(average_hm(&pairs)?)
    } else {
        None
    };
    Ok(SeedSummary {
        runs: runs.len(),
        top1_mean,
        target_macro_top1_mean,
        b2n,
    })
}
