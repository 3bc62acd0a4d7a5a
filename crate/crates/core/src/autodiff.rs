//! A small reverse-mode tape over [`Tensor`] values.
//!
//! Leaves are either constants (frozen encoder weights, image features) or
//! parameters. Gradients are only propagated into nodes that transitively
//! depend on a parameter, so frozen weights never receive a gradient.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{matmul_at_raw, matmul_bt_raw, matmul_raw, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    MeanRows(NodeId),
    MeanAll(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize),
    NormalizeRows(NodeId, Vec<f64>),
    RowNorms(NodeId),
    BatchNorm(NodeId, Vec<f64>),
    MaskDiagonal(NodeId),
    CrossEntropy(NodeId, Vec<usize>, Tensor),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// A computation tape.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `id`; `None` when no gradient
    /// flows there (constants, detached values, unrelated nodes).
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    pub fn is_tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> NodeId {
        self.nodes.push(Node { value, op, tracked });
        NodeId(self.nodes.len() - 1)
    }

    fn tracked(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].tracked)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Copies the value of `x` into a fresh constant leaf (stop-gradient).
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.rows(), "matmul inner dimension");
        let v = matmul_raw(va, vb);
        let t = self.tracked(&[a, b]);
        self.push(v, Op::MatMul(a, b), t)
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.cols(), "matmul_bt inner dimension");
        let v = matmul_bt_raw(va, vb);
        let t = self.tracked(&[a, b]);
        self.push(v, Op::MatMulBt(a, b), t)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape");
        let mut v = va.clone();
        for (x, y) in v.data_mut().iter_mut().zip(vb.data()) {
            *x += y;
        }
        let t = self.tracked(&[a, b]);
        self.push(v, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape");
        let mut v = va.clone();
        for (x, y) in v.data_mut().iter_mut().zip(vb.data()) {
            *x -= y;
        }
        let t = self.tracked(&[a, b]);
        self.push(v, Op::Sub(a, b), t)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!((1, va.cols()), vr.shape(), "add_row shape");
        let mut v = va.clone();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(vr.data()) {
                *x += y;
            }
        }
        let t = self.tracked(&[a, row]);
        self.push(v, Op::AddRow(a, row), t)
    }

    /// Multiplies every row of `a` elementwise by a `1 x n` row.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!((1, va.cols()), vr.shape(), "mul_row shape");
        let mut v = va.clone();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(vr.data()) {
                *x *= y;
            }
        }
        let t = self.tracked(&[a, row]);
        self.push(v, Op::MulRow(a, row), t)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        let t = self.tracked(&[a]);
        self.push(v, Op::Scale(a, c), t)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let t = self.tracked(&[a]);
        self.push(v, Op::Relu(a), t)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(libm::tanh);
        let t = self.tracked(&[a]);
        self.push(v, Op::Tanh(a), t)
    }

    /// Column means, `1 x n`.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let n = va.rows() as f64;
        let mut out = Tensor::zeros(1, va.cols());
        for r in 0..va.rows() {
            for (o, x) in out.data_mut().iter_mut().zip(va.row(r)) {
                *o += x;
            }
        }
        for o in out.data_mut() {
            *o /= n;
        }
        let t = self.tracked(&[a]);
        self.push(out, Op::MeanRows(a), t)
    }

    /// Mean of every entry, `1 x 1`.
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let m = va.sum() / va.len() as f64;
        let t = self.tracked(&[a]);
        self.push(Tensor::row_vector(vec![m]), Op::MeanAll(a), t)
    }

    /// Sum of scalar (or equally shaped) nodes.
    pub fn sum_nodes(&mut self, ids: &[NodeId]) -> NodeId {
        let mut acc = ids[0];
        for &id in &ids[1..] {
            acc = self.add(acc, id);
        }
        acc
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let vals: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat_rows(&vals).expect("concat_rows width");
        let t = self.tracked(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), t)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice_rows(start, len);
        let t = self.tracked(&[a]);
        self.push(v, Op::SliceRows(a, start), t)
    }

    /// Divides each row by its L2 norm.
    pub fn normalize_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut v = va.clone();
        let mut norms = Vec::with_capacity(va.rows());
        for r in 0..v.rows() {
            let n = libm::sqrt(v.row(r).iter().map(|x| x * x).sum::<f64>()).max(NORM_FLOOR);
            for x in v.row_mut(r) {
                *x /= n;
            }
            norms.push(n);
        }
        let t = self.tracked(&[a]);
        self.push(v, Op::NormalizeRows(a, norms), t)
    }

    /// Per-row L2 norms, `rows x 1`.
    pub fn row_norms(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = (0..va.rows())
            .map(|r| libm::sqrt(va.row(r).iter().map(|x| x * x).sum::<f64>()))
            .collect();
        let v = Tensor::from_vec(va.rows(), 1, data).expect("row_norms");
        let t = self.tracked(&[a]);
        self.push(v, Op::RowNorms(a), t)
    }

    /// Standardizes each column with the batch mean and biased variance.
    /// Returns the normalized node together with the batch mean and
    /// unbiased variance, for running-statistic bookkeeping.
    pub fn batch_norm(&mut self, a: NodeId, eps: f64) -> (NodeId, Vec<f64>, Vec<f64>) {
        let va = self.value(a);
        let (n, c) = va.shape();
        let mut mean = vec![0.0; c];
        for r in 0..n {
            for (m, x) in mean.iter_mut().zip(va.row(r)) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; c];
        for r in 0..n {
            for ((s, x), m) in var.iter_mut().zip(va.row(r)).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        let unbiased: Vec<f64> = var
            .iter()
            .map(|s| if n > 1 { s / (n - 1) as f64 } else { 0.0 })
            .collect();
        let inv_std: Vec<f64> = var
            .iter()
            .map(|s| 1.0 / libm::sqrt(s / n as f64 + eps))
            .collect();
        let mut v = va.clone();
        for r in 0..n {
            for ((x, m), is) in v.row_mut(r).iter_mut().zip(&mean).zip(&inv_std) {
                *x = (*x - m) * is;
            }
        }
        let t = self.tracked(&[a]);
        let id = self.push(v, Op::BatchNorm(a, inv_std), t);
        (id, mean, unbiased)
    }

    /// Sets the diagonal of a square matrix to negative infinity.
    pub fn mask_diagonal(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        assert_eq!(v.rows(), v.cols(), "mask_diagonal needs a square matrix");
        for i in 0..v.rows() {
            v.set(i, i, f64::NEG_INFINITY);
        }
        let t = self.tracked(&[a]);
        self.push(v, Op::MaskDiagonal(a), t)
    }

    /// Mean softmax cross-entropy of logit rows against target columns.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let vl = self.value(logits);
        assert_eq!(vl.rows(), targets.len(), "cross_entropy targets");
        let mut probs = vl.clone();
        let mut total = 0.0;
        for (r, &tgt) in targets.iter().enumerate() {
            let row = probs.row_mut(r);
            let lse = log_sum_exp(row);
            total -= row[tgt] - lse;
            for x in row.iter_mut() {
                *x = libm::exp(*x - lse);
            }
        }
        let v = Tensor::row_vector(vec![total / targets.len() as f64]);
        let t = self.tracked(&[logits]);
        self.push(v, Op::CrossEntropy(logits, targets.to_vec(), probs), t)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].tracked {
            return Gradients { grads };
        }
        let rv = &self.nodes[root.0].value;
        grads[root.0] = Some(Tensor::filled(rv.rows(), rv.cols(), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].clone() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.is_tracked(*a) {
                        accumulate(&mut grads, *a, matmul_bt_raw(&g, vb));
                    }
                    if self.is_tracked(*b) {
                        accumulate(&mut grads, *b, matmul_at_raw(va, &g));
                    }
                }
                Op::MatMulBt(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.is_tracked(*a) {
                        accumulate(&mut grads, *a, matmul_raw(&g, vb));
                    }
                    if self.is_tracked(*b) {
                        accumulate(&mut grads, *b, matmul_at_raw(&g, va));
                    }
                }
                Op::Add(a, b) => {
                    if self.is_tracked(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.is_tracked(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.is_tracked(*b) {
                        accumulate(&mut grads, *b, g.map(|x| -x));
                    }
                    if self.is_tracked(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.is_tracked(*row) {
                        accumulate(&mut grads, *row, column_sums(&g));
                    }
                    if self.is_tracked(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::MulRow(a, row) => {
                    let (va, vr) = (self.value(*a), self.value(*row));
                    if self.is_tracked(*row) {
                        let mut gr = Tensor::zeros(1, vr.cols());
                        for r in 0..g.rows() {
                            for ((o, gx), x) in gr.data_mut().iter_mut().zip(g.row(r)).zip(va.row(r)) {
                                *o += gx * x;
                            }
                        }
                        accumulate(&mut grads, *row, gr);
                    }
                    if self.is_tracked(*a) {
                        let mut ga = g;
                        for r in 0..ga.rows() {
                            for (x, s) in ga.row_mut(r).iter_mut().zip(vr.data()) {
                                *x *= s;
                            }
                        }
                        accumulate(&mut grads, *a, ga);
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.map(|x| x * c));
                }
                Op::Relu(a) => {
                    let va = self.value(*a);
                    let mut ga = g;
                    for (x, v) in ga.data_mut().iter_mut().zip(va.data()) {
                        if *v <= 0.0 {
                            *x = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    for (x, y) in ga.data_mut().iter_mut().zip(node.value.data()) {
                        *x *= 1.0 - y * y;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let va = self.value(*a);
                    let n = va.rows() as f64;
                    let mut ga = Tensor::zeros(va.rows(), va.cols());
                    for r in 0..va.rows() {
                        for (x, gx) in ga.row_mut(r).iter_mut().zip(g.data()) {
                            *x = gx / n;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::MeanAll(a) => {
                    let va = self.value(*a);
                    let s = g.data()[0] / va.len() as f64;
                    accumulate(&mut grads, *a, Tensor::filled(va.rows(), va.cols(), s));
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.value(*p).rows();
                        if self.is_tracked(*p) {
                            accumulate(&mut grads, *p, g.slice_rows(offset, rows));
                        }
                        offset += rows;
                    }
                }
                Op::SliceRows(a, start) => {
                    let va = self.value(*a);
                    let mut ga = Tensor::zeros(va.rows(), va.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::NormalizeRows(a, norms) => {
                    let y = &node.value;
                    let mut ga = g;
                    for (r, n) in norms.iter().enumerate() {
                        let yr = y.row(r);
                        let dot: f64 = ga.row(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (x, yv) in ga.row_mut(r).iter_mut().zip(yr) {
                            *x = (*x - yv * dot) / n;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowNorms(a) => {
                    let va = self.value(*a);
                    let mut ga = va.clone();
                    for r in 0..va.rows() {
                        let n = node.value.get(r, 0);
                        let s = if n > 0.0 { g.get(r, 0) / n } else { 0.0 };
                        for x in ga.row_mut(r) {
                            *x *= s;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::BatchNorm(a, inv_std) => {
                    let xhat = &node.value;
                    let (n, c) = xhat.shape();
                    let nf = n as f64;
                    let mut mean_g = vec![0.0; c];
                    let mut mean_gx = vec![0.0; c];
                    for r in 0..n {
                        for j in 0..c {
                            mean_g[j] += g.get(r, j) / nf;
                            mean_gx[j] += g.get(r, j) * xhat.get(r, j) / nf;
                        }
                    }
                    let mut ga = Tensor::zeros(n, c);
                    for r in 0..n {
                        for j in 0..c {
                            let v = inv_std[j] * (g.get(r, j) - mean_g[j] - xhat.get(r, j) * mean_gx[j]);
                            ga.set(r, j, v);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::MaskDiagonal(a) => {
                    let mut ga = g;
                    for i in 0..ga.rows() {
                        ga.set(i, i, 0.0);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::CrossEntropy(a, targets, probs) => {
                    let s = g.data()[0] / targets.len() as f64;
                    let mut ga = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let row = ga.row_mut(r);
                        row[t] -= 1.0;
                        for x in row.iter_mut() {
                            *x *= s;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (x, y) in acc.data_mut().iter_mut().zip(g.data()) {
                *x += y;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, x) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    out
}

/// `log(sum(exp(row)))`, skipping `-inf` entries.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return f64::NEG_INFINITY;
    }
    let s: f64 = row.iter().map(|v| libm::exp(v - max)).sum();
    max + libm::log(s)
}
