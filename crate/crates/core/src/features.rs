//! Content and style statistics and the fixed rescaling that turns them into
//! a prompt seed of constant width.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::FeatureStack;
use crate::error::{shape_err, Error, Result};
use crate::rng::{self, stream};
use crate::tensor::{matmul_raw, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeaturesConfig {
    /// 1-based layer indices feeding the content vector; `None` means all.
    pub content_layers: Option<Vec<usize>>,
    pub d_seed: usize,
    pub std_epsilon: f64,
    pub frg_trainable: bool,
}

impl Default for FeaturesConfig {
    fn default() -> Self {
        Self {
            content_layers: None,
            d_seed: 512,
            std_epsilon: 1e-5,
            frg_trainable: false,
        }
    }
}

impl FeaturesConfig {
    pub fn validate(&self, layer_count: usize) -> Result<()> {
        if self.frg_trainable {
            return Err(Error::Config(
                "features.frg_trainable=true is not supported; the rescaling layer is fixed".into(),
            ));
        }
        if self.d_seed == 0 {
            return Err(Error::Config("features.d_seed must be positive".into()));
        }
        if !(self.std_epsilon >= 0.0) {
            return Err(Error::Config("features.std_epsilon must be >= 0".into()));
        }
        if let Some(layers) = &self.content_layers {
            if layers.is_empty() {
                return Err(Error::Config("features.content_layers is empty".into()));
            }
            for &l in layers {
                if l == 0 || l > layer_count {
                    return Err(Error::Config(format!(
                        "features.content_layers entry {l} outside 1..={layer_count}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Resolved 0-based content layers.
    pub fn layers(&self, layer_count: usize) -> Vec<usize> {
        match &self.content_layers {
            Some(v) => v.iter().map(|l| l - 1).collect(),
            None => (0..layer_count).collect(),
        }
    }
}

/// Concatenated per-layer pooled responses, first layer first.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentVector(pub Vec<f64>);

/// Channel-wise mean and standard deviation of the last layer.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleVector {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Fixed-width input of the meta-network.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSeed(pub Vec<f64>);

impl PromptSeed {
    pub fn width(&self) -> usize {
        self.0.len()
    }
}

/// Pools and concatenates the selected layers (0-based indices).
pub fn content_features(stack: &FeatureStack, layers: &[usize]) -> Result<ContentVector> {
    if stack.layer_count() == 0 {
        return Err(Error::Validation("feature stack has no layers".into()));
    }
    let mut out = Vec::new();
    for &l in layers {
        if l >= stack.layer_count() {
            return Err(shape_err("content_features", format!("layer < {}", stack.layer_count()), l));
        }
        out.extend(stack.pooled(l));
    }
    Ok(ContentVector(out))
}

/// Population mean and `sqrt(var + epsilon)` of each last-layer channel.
pub fn style_features(stack: &FeatureStack, epsilon: f64) -> Result<StyleVector> {
    let last = stack
        .per_layer
        .last()
        .ok_or_else(|| Error::Validation("feature stack has no layers".into()))?;
    let n = last.rows();
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "last layer has {n} position(s); style statistics need at least 2"
        )));
    }
    let c = last.cols();
    let mut mean = alloc::vec![0.0; c];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(last.row(r)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = alloc::vec![0.0; c];
    for r in 0..n {
        for ((s, v), m) in var.iter_mut().zip(last.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| libm::sqrt(s / n as f64 + epsilon)).collect();
    Ok(StyleVector { mean, std })
}

/// Parameter-free linear rescaling of `[content; mean; std]` to the seed width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frg {
    /// `input_width x d_seed`.
    matrix: Tensor,
}

impl Frg {
    pub fn identity(width: usize) -> Self {
        Self {
            matrix: Tensor::identity(width),
        }
    }

    /// Gaussian projection with variance `1 / input_width`.
    pub fn seeded(input_width: usize, d_seed: usize, seed: u64) -> Self {
        let mut r = rng::rng(rng::derive(seed, stream::FRG));
        Self {
            matrix: Tensor::randn(input_width, d_seed, 1.0 / libm::sqrt(input_width as f64), &mut r),
        }
    }

    pub fn from_matrix(matrix: Tensor) -> Self {
        Self { matrix }
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn input_width(&self) -> usize {
        self.matrix.rows()
    }

    pub fn d_seed(&self) -> usize {
        self.matrix.cols()
    }

    pub fn apply(&self, content: &ContentVector, style: &StyleVector) -> Result<PromptSeed> {
        let width = content.0.len() + style.mean.len() + style.std.len();
        if width != self.input_width() || style.mean.len() != style.std.len() {
            return Err(shape_err("frg", self.input_width(), width));
        }
        let mut x = Vec::with_capacity(width);
        x.extend_from_slice(&content.0);
        x.extend_from_slice(&style.mean);
        x.extend_from_slice(&style.std);
        let y = matmul_raw(&Tensor::row_vector(x), &self.matrix);
        Ok(PromptSeed(y.into_vec()))
    }
}

/// Width of `[content; mean; std]` for the given layer widths.
pub fn frg_input_width(layer_dims: &[usize], content_layers: &[usize]) -> usize {
    let content: usize = content_layers.iter().map(|&l| layer_dims[l]).sum();
    content + 2 * layer_dims.last().copied().unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn stack(maps: Vec<Tensor>) -> FeatureStack {
        FeatureStack {
            per_layer: maps,
            final_pooled: vec![],
        }
    }

    fn single_row(v: &[f64]) -> Tensor {
        Tensor::row_vector(v.to_vec())
    }

    #[test]
    fn content_concatenates_in_layer_order() {
        let s = stack(vec![single_row(&[1.0, 2.0]), single_row(&[3.0, 4.0, 5.0])]);
        let c = content_features(&s, &[0, 1]).unwrap();
        assert_eq!(c.0, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let z = stack(vec![Tensor::zeros(4, 2), Tensor::zeros(4, 3)]);
        assert_eq!(content_features(&z, &[0, 1]).unwrap().0, vec![0.0; 5]);
    }

    #[test]
    fn style_two_point_statistics() {
        let s = stack(vec![Tensor::from_vec(2, 1, vec![1.0, 3.0]).unwrap()]);
        let st = style_features(&s, 0.0).unwrap();
        assert_eq!(st.mean, vec![2.0]);
        assert_eq!(st.std, vec![1.0]);
    }

    #[test]
    fn style_of_constant_map() {
        let s = stack(vec![Tensor::filled(5, 3, 0.7)]);
        let st = style_features(&s, 0.0).unwrap();
        for m in &st.mean {
            assert!((m - 0.7).abs() < 1e-15);
        }
        assert!(st.std.iter().all(|&v| v == 0.0));
        // default epsilon keeps the square root away from zero
        let st = style_features(&s, 1e-5).unwrap();
        assert!(st.std.iter().all(|&v| (v - libm::sqrt(1e-5)).abs() < 1e-12));
    }

    #[test]
    fn single_position_is_degenerate() {
        let s = stack(vec![single_row(&[1.0, 2.0])]);
        assert!(matches!(style_features(&s, 1e-5), Err(Error::Degenerate(_))));
    }

    #[test]
    fn frg_identity_and_zero() {
        let c = ContentVector(vec![1.0, 2.0]);
        let st = StyleVector {
            mean: vec![3.0],
            std: vec![4.0],
        };
        let seed = Frg::identity(4).apply(&c, &st).unwrap();
        assert_eq!(seed.0, vec![1.0, 2.0, 3.0, 4.0]);
        let f = Frg::seeded(4, 6, 9);
        let z = f
            .apply(
                &ContentVector(vec![0.0; 2]),
                &StyleVector {
                    mean: vec![0.0],
                    std: vec![0.0],
                },
            )
            .unwrap();
        assert_eq!(z.0, vec![0.0; 6]);
        assert!(Frg::identity(5).apply(&c, &st).is_err());
    }

    #[test]
    fn frg_matches_stored_matrix() {
        let f = Frg::seeded(3, 2, 5);
        let c = ContentVector(vec![0.5]);
        let st = StyleVector {
            mean: vec![-1.0],
            std: vec![2.0],
        };
        let out = f.apply(&c, &st).unwrap();
        let m = f.matrix();
        for j in 0..2 {
            let want = 0.5 * m.get(0, j) - m.get(1, j) + 2.0 * m.get(2, j);
            assert!((out.0[j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn validate_rejects_trainable_and_bad_layers() {
        let mut c = FeaturesConfig::default();
        assert!(c.validate(3).is_ok());
        c.content_layers = Some(vec![4]);
        assert!(c.validate(3).is_err());
        c.content_layers = Some(vec![1, 3]);
        assert_eq!(c.layers(3), vec![0, 2]);
        c.frg_trainable = true;
        assert!(c.validate(3).is_err());
    }
}
