//! Label-space splits for base-to-new, cross-dataset and domain
//! generalization evaluation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    BaseToNew,
    CrossDataset,
    DomainGeneralization,
}

impl ProtocolKind {
    pub fn label(self) -> &'static str {
        match self {
            ProtocolKind::BaseToNew => "base_to_new",
            ProtocolKind::CrossDataset => "cross_dataset",
            ProtocolKind::DomainGeneralization => "domain_generalization",
        }
    }
}

/// Classes of one evaluation target. `classes` are ids in the target's own
/// label space; `as_seen[i]` is the matching position in the split's seen
/// list for domain generalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetClasses {
    pub dataset: usize,
    pub classes: Vec<usize>,
    pub as_seen: Option<Vec<usize>>,
}

/// Dataset index 0 is the source; the remaining indices are targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSplit {
    pub kind: ProtocolKind,
    pub seed: u64,
    /// Source class ids used for training.
    pub seen: Vec<usize>,
    /// Base-to-new: held-out source classes. Domain generalization: equal to
    /// `seen`. Cross-dataset: empty, since targets carry their own label sets.
    pub unseen: Vec<usize>,
    pub targets: Vec<TargetClasses>,
}

pub fn normalize_name(s: &str) -> String {
    s.trim().to_lowercase()
}

/// `datasets[0]` holds the source class names; the rest are targets.
pub fn make_split(kind: ProtocolKind, datasets: &[&[String]], seed: u64) -> Result<ProtocolSplit> {
    let source = datasets
        .first()
        .ok_or_else(|| Error::Protocol("no datasets given".into()))?;
    let k = source.len();
    match kind {
        ProtocolKind::BaseToNew => {
            if datasets.len() != 1 {
                return Err(Error::Protocol(format!(
                    "base_to_new takes one dataset, got {}",
                    datasets.len()
                )));
            }
            if k < 2 {
                return Err(Error::Protocol(format!("base_to_new needs at least 2 classes, got {k}")));
            }
            let mut ids: Vec<usize> = (0..k).collect();
            ids.shuffle(&mut rng::rng(rng::derive(seed, stream::SPLIT)));
            let n_seen = k.div_ceil(2);
            let mut seen = ids[..n_seen].to_vec();
            let mut unseen = ids[n_seen..].to_vec();
            seen.sort_unstable();
            unseen.sort_unstable();
            Ok(ProtocolSplit {
                kind,
                seed,
                seen,
                unseen,
                targets: Vec::new(),
            })
        }
        ProtocolKind::CrossDataset => {
            if datasets.len() < 2 {
                return Err(Error::Protocol("cross_dataset needs a source and at least one target".into()));
            }
            let targets = datasets[1..]
                .iter()
                .enumerate()
                .map(|(i, names)| TargetClasses {
                    dataset: i + 1,
                    classes: (0..names.len()).collect(),
                    as_seen: None,
                })
                .collect();
            Ok(ProtocolSplit {
                kind,
                seed,
                seen: (0..k).collect(),
                unseen: Vec::new(),
                targets,
            })
        }
        ProtocolKind::DomainGeneralization => {
            if datasets.len() < 2 {
                return Err(Error::Protocol(
                    "domain_generalization needs a source and at least one target".into(),
                ));
            }
            let src: BTreeMap<String, usize> = source
                .iter()
                .enumerate()
                .map(|(i, n)| (normalize_name(n), i))
                .collect();
            // a class is seen if some target shares it
            let mut common: Vec<usize> = Vec::new();
            for (name, &id) in &src {
                if datasets[1..]
                    .iter()
                    .any(|t| t.iter().any(|n| normalize_name(n) == *name))
                {
                    common.push(id);
                }
            }
            common.sort_unstable();
            if common.is_empty() {
                return Err(Error::Protocol("source and targets share no class names".into()));
            }
            let pos: BTreeMap<usize, usize> = common.iter().enumerate().map(|(p, &c)| (c, p)).collect();
            let mut targets = Vec::new();
            for (i, names) in datasets[1..].iter().enumerate() {
                let mut classes = Vec::new();
                let mut as_seen = Vec::new();
                let mut unmatched = Vec::new();
                for (tid, n) in names.iter().enumerate() {
                    match src.get(&normalize_name(n)) {
                        Some(sid) if pos.contains_key(sid) => {
                            classes.push(tid);
                            as_seen.push(pos[sid]);
                        }
                        _ => unmatched.push(n.as_str()),
                    }
                }
                if !unmatched.is_empty() {
                    log::warn!(
                        "target {} has {} class(es) without a source match: {:?}",
                        i + 1,
                        unmatched.len(),
                        unmatched
                    );
                }
                targets.push(TargetClasses {
                    dataset: i + 1,
                    classes,
                    as_seen: Some(as_seen),
                });
            }
            Ok(ProtocolSplit {
                kind,
                seed,
                seen: common.clone(),
                unseen: common,
                targets,
            })
        }
    }
}

/// Checks the set relations a split of `kind` must satisfy.
pub fn check_split(split: &ProtocolSplit, source_classes: usize) -> Result<()> {
    match split.kind {
        ProtocolKind::BaseToNew => {
            let mut all: Vec<usize> = split.seen.iter().chain(&split.unseen).copied().collect();
            all.sort_unstable();
            let expect: Vec<usize> = (0..source_classes).collect();
            if all != expect {
                return Err(Error::Protocol("seen and unseen must partition the classes".into()));
            }
            if split.seen.len() != source_classes.div_ceil(2) {
                return Err(Error::Protocol("seen set must hold ceil(K/2) classes".into()));
            }
        }
        ProtocolKind::DomainGeneralization => {
            if split.seen != split.unseen {
                return Err(Error::Protocol("domain generalization label sets must be identical".into()));
            }
        }
        ProtocolKind::CrossDataset => {}
    }
    Ok(())
}
