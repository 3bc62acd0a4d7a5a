//! Fixed-seed random-weight encoders for desk-scale runs.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{words, FeatureStack, TextBackbone, VisionBackbone};
use crate::autodiff::{Graph, NodeId};
use crate::error::{shape_err, Error, Result};
use crate::image::{Normalization, NormalizedImage};
use crate::rng::{self, stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyBackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub layer_dims: Vec<usize>,
    pub output_dim: usize,
    pub embed_dim: usize,
    pub text_hidden: usize,
    pub context_capacity: usize,
}

impl Default for ToyBackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            layer_dims: alloc::vec![16, 32, 64],
            output_dim: 64,
            embed_dim: 64,
            text_hidden: 64,
            context_capacity: 77,
        }
    }
}

/// Patch-embedding encoder: layer 1 embeds non-overlapping patches, later
/// layers merge 2x2 neighbourhoods while the grid is at least 4 wide and map
/// positions independently afterwards. Every layer is `tanh(x W + b)`.
#[derive(Clone, Debug)]
pub struct ToyVisionBackbone {
    cfg: ToyBackboneConfig,
    layers: Vec<(Tensor, Tensor)>,
    merge: Vec<bool>,
    out_w: Tensor,
    out_b: Tensor,
    norm: Normalization,
}

impl ToyVisionBackbone {
    pub fn new(cfg: &ToyBackboneConfig, seed: u64) -> Result<Self> {
        if cfg.layer_dims.is_empty() {
            return Err(Error::Config("toy backbone needs at least one layer".into()));
        }
        if cfg.patch_size == 0 || cfg.image_size % cfg.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not a multiple of patch_size {}",
                cfg.image_size, cfg.patch_size
            )));
        }
        let mut r = rng::rng(rng::derive(seed, stream::BACKBONE_VISION));
        let mut grid = cfg.image_size / cfg.patch_size;
        let mut in_dim = 3 * cfg.patch_size * cfg.patch_size;
        let mut layers = Vec::new();
        let mut merge = Vec::new();
        for (i, &d) in cfg.layer_dims.iter().enumerate() {
            let merges = i > 0 && grid >= 4 && grid % 2 == 0;
            if merges {
                grid /= 2;
                in_dim *= 4;
            }
            merge.push(merges);
            let w = Tensor::randn(in_dim, d, 1.0 / libm::sqrt(in_dim as f64), &mut r);
            let b = Tensor::randn(1, d, 0.1, &mut r);
            layers.push((w, b));
            in_dim = d;
        }
        let last = *cfg.layer_dims.last().unwrap_or(&1);
        let out_w = Tensor::randn(last, cfg.output_dim, 1.0 / libm::sqrt(last as f64), &mut r);
        let out_b = Tensor::randn(1, cfg.output_dim, 0.1, &mut r);
        Ok(Self {
            cfg: cfg.clone(),
            layers,
            merge,
            out_w,
            out_b,
            norm: Normalization::clip(),
        })
    }

    pub fn layer_weights(&self, l: usize) -> (&Tensor, &Tensor) {
        (&self.layers[l].0, &self.layers[l].1)
    }

    pub fn output_weights(&self) -> (&Tensor, &Tensor) {
        (&self.out_w, &self.out_b)
    }

    fn patches(&self, image: &NormalizedImage) -> Tensor {
        let p = self.cfg.patch_size;
        let grid = self.cfg.image_size / p;
        let dim = image.channels * p * p;
        let mut out = Tensor::zeros(grid * grid, dim);
        for gy in 0..grid {
            for gx in 0..grid {
                let row = out.row_mut(gy * grid + gx);
                let mut k = 0;
                for c in 0..image.channels {
                    for py in 0..p {
                        for px in 0..p {
                            let y = gy * p + py;
                            let x = gx * p + px;
                            row[k] = image.data[(c * image.height + y) * image.width + x];
                            k += 1;
                        }
                    }
                }
            }
        }
        out
    }
}

fn affine_tanh(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut y = crate::tensor::matmul_raw(x, w);
    for r in 0..y.rows() {
        for (v, bv) in y.row_mut(r).iter_mut().zip(b.data()) {
            *v = libm::tanh(*v + bv);
        }
    }
    y
}

/// Concatenates each 2x2 neighbourhood of a `grid x grid` map.
fn merge_2x2(x: &Tensor, grid: usize) -> Tensor {
    let half = grid / 2;
    let c = x.cols();
    let mut out = Tensor::zeros(half * half, 4 * c);
    for y in 0..half {
        for xx in 0..half {
            let row = out.row_mut(y * half + xx);
            let srcs = [
                (2 * y) * grid + 2 * xx,
                (2 * y) * grid + 2 * xx + 1,
                (2 * y + 1) * grid + 2 * xx,
                (2 * y + 1) * grid + 2 * xx + 1,
            ];
            for (k, s) in srcs.iter().enumerate() {
                row[k * c..(k + 1) * c].copy_from_slice(x.row(*s));
            }
        }
    }
    out
}

impl VisionBackbone for ToyVisionBackbone {
    fn layer_count(&self) -> usize {
        self.layers.len()
    }

    fn layer_dims(&self) -> &[usize] {
        &self.cfg.layer_dims
    }

    fn output_dim(&self) -> usize {
        self.cfg.output_dim
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        (3, self.cfg.image_size, self.cfg.image_size)
    }

    fn normalization(&self) -> &Normalization {
        &self.norm
    }

    fn encode(&self, image: &NormalizedImage) -> Result<FeatureStack> {
        let mut grid = self.cfg.image_size / self.cfg.patch_size;
        let mut x = self.patches(image);
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for ((w, b), &merges) in self.layers.iter().zip(&self.merge) {
            let input = if merges {
                let m = merge_2x2(&x, grid);
                grid /= 2;
                m
            } else {
                x
            };
            x = affine_tanh(&input, w, b);
            per_layer.push(x.clone());
        }
        let last = per_layer.last().expect("at least one layer");
        let n = last.rows() as f64;
        let mut pooled = Tensor::zeros(1, last.cols());
        for r in 0..last.rows() {
            for (o, v) in pooled.data_mut().iter_mut().zip(last.row(r)) {
                *o += v / n;
            }
        }
        let mut fin = crate::tensor::matmul_raw(&pooled, &self.out_w);
        for (v, b) in fin.data_mut().iter_mut().zip(self.out_b.data()) {
            *v += b;
        }
        Ok(FeatureStack {
            per_layer,
            final_pooled: fin.into_vec(),
        })
    }

    fn checksum(&self) -> u64 {
        let mut h = 0u64;
        for (w, b) in &self.layers {
            h = w.checksum(h);
            h = b.checksum(h);
        }
        h = self.out_w.checksum(h);
        self.out_b.checksum(h)
    }
}

/// Token encoder over an orthonormal vocabulary. With
/// `h_p = tanh((e_p + pos_p) W1 + b1)` the output is
/// `W2 * (mean_p h_p + h_last) / 2 + b2`; the final-token term plays the part
/// of an end-of-text readout, so the class name is not diluted by the context.
#[derive(Clone, Debug)]
pub struct ToyTextBackbone {
    cfg: ToyBackboneConfig,
    vocab: Vec<String>,
    table: Tensor,
    pos: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl ToyTextBackbone {
    /// `vocab` words get rows `0..vocab.len()` of a fixed orthonormal matrix,
    /// in order of first appearance.
    pub fn new(cfg: &ToyBackboneConfig, seed: u64, vocab: &[String]) -> Result<Self> {
        let mut uniq: Vec<String> = Vec::new();
        for w in vocab.iter().flat_map(|v| words(v)) {
            if !uniq.contains(&w) {
                uniq.push(w);
            }
        }
        let e = cfg.embed_dim;
        if uniq.len() > e {
            return Err(Error::Config(format!(
                "toy vocabulary of {} words exceeds embed_dim {e}",
                uniq.len()
            )));
        }
        let mut r = rng::rng(rng::derive(seed, stream::BACKBONE_TEXT));
        let table = orthonormal_rows(Tensor::randn(e, e, 1.0, &mut r));
        let pos = Tensor::randn(cfg.context_capacity, e, 0.1, &mut r);
        let w1 = Tensor::randn(e, cfg.text_hidden, 1.5, &mut r);
        let b1 = Tensor::randn(1, cfg.text_hidden, 0.1, &mut r);
        let w2 = Tensor::randn(
            cfg.text_hidden,
            cfg.output_dim,
            1.0 / libm::sqrt(cfg.text_hidden as f64),
            &mut r,
        );
        let b2 = Tensor::randn(1, cfg.output_dim, 0.1, &mut r);
        Ok(Self {
            cfg: cfg.clone(),
            vocab: uniq,
            table,
            pos,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    /// The orthonormal embedding table, one row per vocabulary slot.
    pub fn embedding_table(&self) -> &Tensor {
        &self.table
    }

    /// `(pos, w1, b1, w2, b2)`.
    pub fn weights(&self) -> (&Tensor, &Tensor, &Tensor, &Tensor, &Tensor) {
        (&self.pos, &self.w1, &self.b1, &self.w2, &self.b2)
    }
}

/// Modified Gram-Schmidt over rows.
fn orthonormal_rows(mut m: Tensor) -> Tensor {
    let n = m.rows();
    for i in 0..n {
        for j in 0..i {
            let dot: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
            let rj: Vec<f64> = m.row(j).to_vec();
            for (a, b) in m.row_mut(i).iter_mut().zip(&rj) {
                *a -= dot * b;
            }
        }
        let norm = libm::sqrt(m.row(i).iter().map(|a| a * a).sum::<f64>());
        for a in m.row_mut(i) {
            *a /= norm;
        }
    }
    m
}

impl TextBackbone for ToyTextBackbone {
    fn context_capacity(&self) -> usize {
        self.cfg.context_capacity
    }

    fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    fn output_dim(&self) -> usize {
        self.cfg.output_dim
    }

    fn forward(&self, g: &mut Graph, tokens: NodeId) -> Result<NodeId> {
        let (n, e) = g.value(tokens).shape();
        if e != self.cfg.embed_dim {
            return Err(shape_err("ToyTextBackbone::forward", self.cfg.embed_dim, e));
        }
        if n > self.cfg.context_capacity {
            return Err(Error::Truncation {
                len: n,
                capacity: self.cfg.context_capacity,
            });
        }
        let pos = g.constant(self.pos.slice_rows(0, n));
        let w1 = g.constant(self.w1.clone());
        let b1 = g.constant(self.b1.clone());
        let w2 = g.constant(self.w2.clone());
        let b2 = g.constant(self.b2.clone());
        let x = g.add(tokens, pos);
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.tanh(h);
        let mean = g.mean_rows(h);
        let last = g.slice_rows(h, n - 1, 1);
        let p = g.add(mean, last);
        let p = g.scale(p, 0.5);
        let o = g.matmul(p, w2);
        Ok(g.add_row(o, b2))
    }

    fn tokenize(&self, text: &str) -> Result<Tensor> {
        let ws = words(text);
        if ws.is_empty() {
            return Err(Error::Validation(format!("no tokens in {text:?}")));
        }
        let mut out = Tensor::zeros(ws.len(), self.cfg.embed_dim);
        for (i, w) in ws.iter().enumerate() {
            let idx = self
                .vocab
                .iter()
                .position(|v| v == w)
                .ok_or_else(|| Error::Validation(format!("word {:?} not in toy vocabulary", w.to_string())))?;
            out.row_mut(i).copy_from_slice(self.table.row(idx));
        }
        Ok(out)
    }

    fn checksum(&self) -> u64 {
        let mut h = self.table.checksum(0);
        for t in [&self.pos, &self.w1, &self.b1, &self.w2, &self.b2] {
            h = t.checksum(h);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{embed_class_name, encode_image, encode_text};
    use crate::image::Image;
    use alloc::vec;

    fn vocab() -> Vec<String> {
        ["a photo of", "dog", "golden retriever", "cat"].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn toy_shape_contract() {
        let b = ToyVisionBackbone::new(&ToyBackboneConfig::default(), 0).unwrap();
        let img = Image::filled(3, 32, 32, 0.3).normalize(b.normalization()).unwrap();
        let s = encode_image(&b, &img).unwrap();
        assert_eq!(s.layer_count(), 3);
        let widths: Vec<usize> = s.per_layer.iter().map(|m| m.cols()).collect();
        assert_eq!(widths, vec![16, 32, 64]);
        assert_eq!(s.per_layer[2].rows(), 4);
        assert_eq!(s.final_pooled.len(), 64);
        assert_eq!(encode_image(&b, &img).unwrap(), s);
    }

    #[test]
    fn wrong_resolution_is_named() {
        let b = ToyVisionBackbone::new(&ToyBackboneConfig::default(), 0).unwrap();
        let img = Image::filled(3, 16, 32, 0.3).normalize(b.normalization()).unwrap();
        let err = encode_image(&b, &img).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("3x32x32") && msg.contains("3x16x32"), "{msg}");
    }

    #[test]
    fn vocabulary_rows_are_orthonormal() {
        let t = ToyTextBackbone::new(&ToyBackboneConfig::default(), 1, &vocab()).unwrap();
        let m = t.embedding_table();
        for i in 0..m.rows() {
            for j in 0..m.rows() {
                let d: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
        let dog = embed_class_name(&t, "dog").unwrap();
        assert_eq!(dog, embed_class_name(&t, "dog").unwrap());
        assert_eq!(dog.row(0), m.row(3));
        assert_eq!(embed_class_name(&t, "golden retriever").unwrap().rows(), 2);
        assert!(embed_class_name(&t, "  ").is_err());
        assert!(embed_class_name(&t, "zebra").is_err());
    }

    #[test]
    fn over_capacity_is_a_truncation_error() {
        let t = ToyTextBackbone::new(&ToyBackboneConfig::default(), 1, &vocab()).unwrap();
        let ok = Tensor::zeros(77, 64);
        assert!(encode_text(&t, &ok).is_ok());
        let long = Tensor::zeros(78, 64);
        assert_eq!(
            encode_text(&t, &long).unwrap_err(),
            Error::Truncation { len: 78, capacity: 77 }
        );
    }

    #[test]
    fn zero_sequence_gives_bias_response() {
        let t = ToyTextBackbone::new(&ToyBackboneConfig::default(), 1, &vocab()).unwrap();
        let out = encode_text(&t, &Tensor::zeros(4, 64)).unwrap();
        // independent recomputation from the exposed weights
        let (pos, w1, b1, w2, b2) = t.weights();
        let mut pooled = vec![0.0; w1.cols()];
        for p in 0..4 {
            for h in 0..w1.cols() {
                let mut acc = b1.get(0, h);
                for e in 0..w1.rows() {
                    acc += pos.get(p, e) * w1.get(e, h);
                }
                let a = libm::tanh(acc);
                pooled[h] += a / 8.0;
                if p == 3 {
                    pooled[h] += a / 2.0;
                }
            }
        }
        for o in 0..w2.cols() {
            let mut acc = b2.get(0, o);
            for h in 0..w1.cols() {
                acc += pooled[h] * w2.get(h, o);
            }
            assert!((acc - out[o]).abs() < 1e-12);
        }
        assert_eq!(out, encode_text(&t, &Tensor::zeros(4, 64)).unwrap());
    }
}
