#![allow(dead_code)]

use std::path::Path;

use sha2::{Digest, Sha256};

use vlprompt::config::{self, RunConfig};
use vlprompt_core::backbone::{ToyTextBackbone, ToyVisionBackbone, VisionBackbone};
use vlprompt_core::model::{toy_vocabulary, Encoders};
use vlprompt_core::tensor::Tensor;

/// Resolves a config from dotted overrides on top of the defaults.
pub fn cfg(overrides: &[&str]) -> RunConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    config::resolve_value(None, &o).expect("test config resolves")
}

/// Closed-set toy2 run: toy2 trains on both classes, toy4 is the target.
pub fn closed_set(extra: &[&str]) -> RunConfig {
    let mut o = vec!["data.protocol=cross_dataset", "data.targets=[toy4]"];
    o.extend_from_slice(extra);
    cfg(&o)
}

/// Typed copies of the toy encoders a config builds, so their raw weights
/// can be read back.
pub struct ToyPair {
    pub vision: ToyVisionBackbone,
    pub text: ToyTextBackbone,
}

impl ToyPair {
    pub fn new(c: &RunConfig, names: &[&[String]]) -> Self {
        let vocab = toy_vocabulary(&c.rho.template, names.iter().flat_map(|n| n.iter()));
        Self {
            vision: ToyVisionBackbone::new(&c.backbone.toy, c.seed).unwrap(),
            text: ToyTextBackbone::new(&c.backbone.toy, c.seed, &vocab).unwrap(),
        }
    }

    pub fn encoders(&self) -> Encoders<'_> {
        Encoders {
            vision: &self.vision,
            text: &self.text,
        }
    }

    /// SHA-256 over the bytes of every encoder weight.
    pub fn weight_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        let mut put = |t: &Tensor| {
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        };
        for l in 0..self.vision.layer_count() {
            let (w, b) = self.vision.layer_weights(l);
            put(w);
            put(b);
        }
        let (w, b) = self.vision.output_weights();
        put(w);
        put(b);
        put(self.text.embedding_table());
        let (pos, w1, b1, w2, b2) = self.text.weights();
        for t in [pos, w1, b1, w2, b2] {
            put(t);
        }
        h.finalize().into()
    }
}

pub fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}
