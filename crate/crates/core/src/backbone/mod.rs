//! Frozen dual-encoder interface.
//!
//! Vision encoders expose every layer's response map so that content and
//! style statistics can be taken from them; text encoders consume sequences
//! of continuous token embeddings so learned context vectors can be fed in
//! directly. Neither side is ever updated by training.

mod toy;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

pub use toy::{ToyBackboneConfig, ToyTextBackbone, ToyVisionBackbone};

use crate::autodiff::{Graph, NodeId};
use crate::error::{shape_err, Error, Result};
use crate::image::{Normalization, NormalizedImage};
use crate::tensor::Tensor;

/// Per-layer responses of a vision encoder for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    /// One `positions x channels` map per layer, first layer first.
    pub per_layer: Vec<Tensor>,
    pub final_pooled: Vec<f64>,
}

impl FeatureStack {
    pub fn layer_count(&self) -> usize {
        self.per_layer.len()
    }

    /// Global average over positions of layer `l` (0-based).
    pub fn pooled(&self, l: usize) -> Vec<f64> {
        let map = &self.per_layer[l];
        let n = map.rows() as f64;
        let mut out = alloc::vec![0.0; map.cols()];
        for r in 0..map.rows() {
            for (o, v) in out.iter_mut().zip(map.row(r)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n;
        }
        out
    }
}

pub trait VisionBackbone: Send + Sync {
    fn layer_count(&self) -> usize;
    fn layer_dims(&self) -> &[usize];
    fn output_dim(&self) -> usize;
    /// Expected `(channels, height, width)`.
    fn input_shape(&self) -> (usize, usize, usize);
    fn normalization(&self) -> &Normalization;
    fn encode(&self, image: &NormalizedImage) -> Result<FeatureStack>;
    /// Digest over every parameter.
    fn checksum(&self) -> u64;
    fn is_frozen(&self) -> bool {
        true
    }
}

pub trait TextBackbone: Send + Sync {
    fn context_capacity(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// Differentiable forward over an `n x embed_dim` token node, producing a
    /// `1 x output_dim` node. Encoder weights enter the graph as constants.
    fn forward(&self, graph: &mut Graph, tokens: NodeId) -> Result<NodeId>;
    /// Token embeddings for a piece of text, one row per token.
    fn tokenize(&self, text: &str) -> Result<Tensor>;
    fn checksum(&self) -> u64;
    fn is_frozen(&self) -> bool {
        true
    }
}

/// Runs the vision encoder after checking the input against its contract.
pub fn encode_image(backbone: &dyn VisionBackbone, image: &NormalizedImage) -> Result<FeatureStack> {
    let expected = backbone.input_shape();
    let actual = (image.channels, image.height, image.width);
    if expected != actual {
        return Err(shape_err(
            "encode_image",
            format!("{}x{}x{}", expected.0, expected.1, expected.2),
            format!("{}x{}x{}", actual.0, actual.1, actual.2),
        ));
    }
    let stack = backbone.encode(image)?;
    debug_assert_eq!(stack.layer_count(), backbone.layer_count());
    Ok(stack)
}

/// Validates a token sequence against the text encoder's capacity and width.
pub fn check_tokens(backbone: &dyn TextBackbone, tokens: &Tensor) -> Result<()> {
    if tokens.rows() > backbone.context_capacity() {
        return Err(Error::Truncation {
            len: tokens.rows(),
            capacity: backbone.context_capacity(),
        });
    }
    if tokens.rows() == 0 {
        return Err(Error::Validation("empty token sequence".into()));
    }
    if tokens.cols() != backbone.embed_dim() {
        return Err(shape_err("encode_text", backbone.embed_dim(), tokens.cols()));
    }
    Ok(())
}

/// Encodes a sequence of continuous token embeddings.
pub fn encode_text(backbone: &dyn TextBackbone, tokens: &Tensor) -> Result<Vec<f64>> {
    check_tokens(backbone, tokens)?;
    let mut g = Graph::new();
    let t = g.constant(tokens.clone());
    let out = backbone.forward(&mut g, t)?;
    Ok(g.value(out).data().to_vec())
}

/// Token embeddings for a class name, appended after the context tokens.
pub fn embed_class_name(backbone: &dyn TextBackbone, class_name: &str) -> Result<Tensor> {
    if class_name.trim().is_empty() {
        return Err(Error::Validation("class name must be non-empty".into()));
    }
    backbone.tokenize(class_name)
}

/// Lowercased word pieces of `text`.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}
