//! Reverse-mode gradient tape over [`Matrix`] values.
//!
//! Every primitive pushes a node holding its forward value and the handles
//! of its operands. [`Tape::backward`] walks the nodes in reverse order and
//! accumulates adjoints, so any loss composed from these primitives is
//! differentiable without hand-written chain rules.
//!
//! ```
//! use ulcag_core::numcore::{Matrix, Tape};
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Matrix::from_rows(&[[1.0, -2.0]]));
//! let sq = tape.mul(w, w).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).data(), &[2.0, -4.0]);
//! ```

use std::sync::Arc;

use super::matrix::{matmul_into, Matrix};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    SoftmaxRow(Var),
    ScaleRows(Var, Var),
    CrossEntropy(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    Mean(Var),
    Sum(Var),
    Reshape(Var),
    GraphPropagate(Var, Arc<Matrix>),
    NodeLinear { h: Var, w: Var, b: Var },
    WeightedBce { p: Var, targets: Matrix, weights: Vec<f64> },
    WeightedBceLogits { s: Var, targets: Matrix, weights: Vec<f64> },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Single-owner record of primitive applications.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `var`, shape-matched to its value. Nodes that do not
    /// influence the loss get a zero matrix.
    pub fn get(&self, var: Var) -> Matrix {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, var: Var) -> Matrix {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[var.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow or loss of precision for large `|x|`.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input or parameter.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Copies the current value of `v` into a fresh leaf, cutting the
    /// gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `x + 1ᵀb` where `b` is a single row.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::shape("add_row_bias", xv.shape(), bv.shape()));
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (o, &bias) in value.row_mut(r).iter_mut().zip(bv.data()) {
                *o += bias;
            }
        }
        Ok(self.push(value, Op::AddRowBias(x, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| c * x);
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddScalar(a))
    }

    /// `x` for `x >= 0`, `slope * x` otherwise. The derivative at 0 is `slope`.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x >= 0.0 { x } else { slope * x });
        self.push(value, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid_scalar);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_row(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRow(a))
    }

    /// Multiplies row `i` of `x` by `s[i]`; `s` is an N×1 column.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        if sv.cols() != 1 || sv.rows() != xv.rows() {
            return Err(Error::shape("scale_rows", xv.shape(), sv.shape()));
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            let k = sv.get(r, 0);
            value.row_mut(r).iter_mut().for_each(|v| *v *= k);
        }
        Ok(self.push(value, Op::ScaleRows(x, s)))
    }

    /// Mean softmax cross-entropy of `logits` (N×C) against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if labels.len() != lv.rows() {
            return Err(Error::shape("cross_entropy", lv.shape(), (labels.len(), 1)));
        }
        let classes = lv.cols();
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::Index {
                    what: "class logits",
                    index: y,
                    bound: classes,
                });
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[y];
        }
        let value = Matrix::scalar(total / labels.len() as f64);
        Ok(self.push(value, Op::CrossEntropy(logits, labels.to_vec())))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.rows()) {
            return Err(Error::Index {
                what: "rows",
                index: bad,
                bound: av.rows(),
            });
        }
        let value = av.select_rows(idx);
        Ok(self.push(value, Op::SelectRows(a, idx.to_vec())))
    }

    /// Mean of all entries, as a 1×1 matrix.
    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Matrix::scalar(av.sum() / av.len() as f64);
        self.push(value, Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Row-major reinterpretation.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(a).clone().reshape(rows, cols)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// For `x` stacking per-sample node blocks (N·M × B) computes `adj · X_i`
    /// for each M×B block, with `adj` held constant.
    pub fn graph_propagate(&mut self, x: Var, adj: Arc<Matrix>) -> Result<Var> {
        let xv = self.value(x);
        let m = adj.rows();
        if adj.cols() != m || m == 0 || xv.rows() % m != 0 {
            return Err(Error::shape("graph_propagate", xv.shape(), adj.shape()));
        }
        let b = xv.cols();
        let mut value = Matrix::zeros(xv.rows(), b);
        for block in 0..xv.rows() / m {
            let span = block * m * b..(block + 1) * m * b;
            matmul_into(
                adj.data(),
                &xv.data()[span.clone()],
                &mut value.data_mut()[span],
                m,
                m,
                b,
            );
        }
        Ok(self.push(value, Op::GraphPropagate(x, adj)))
    }

    /// Per-node affine readout. `h` stacks N blocks of M node rows (N·M × K),
    /// `w` is M×K (one weight row per node) and `b` is 1×M. Output is N×M
    /// with `out[i, m] = h[i·M + m] · w[m] + b[m]`.
    pub fn node_linear(&mut self, h: Var, w: Var, b: Var) -> Result<Var> {
        let (hv, wv, bv) = (self.value(h), self.value(w), self.value(b));
        let m = wv.rows();
        if m == 0 || wv.cols() != hv.cols() || hv.rows() % m != 0 {
            return Err(Error::shape("node_linear", hv.shape(), wv.shape()));
        }
        if bv.shape() != (1, m) {
            return Err(Error::shape("node_linear bias", bv.shape(), (1, m)));
        }
        let n = hv.rows() / m;
        let mut value = Matrix::zeros(n, m);
        for i in 0..n {
            for node in 0..m {
                let dot: f64 = hv
                    .row(i * m + node)
                    .iter()
                    .zip(wv.row(node))
                    .map(|(a, c)| a * c)
                    .sum();
                value.set(i, node, dot + bv.get(0, node));
            }
        }
        Ok(self.push(value, Op::NodeLinear { h, w, b }))
    }

    /// `-(1/N) Σ_i w_i Σ_m [z log p + (1-z) log(1-p)]` with `p` clamped to
    /// `[PROB_CLAMP, 1 - PROB_CLAMP]`. Targets and weights are constants.
    pub fn weighted_bce(&mut self, p: Var, targets: &Matrix, weights: &[f64]) -> Result<Var> {
        let pv = self.value(p);
        if pv.shape() != targets.shape() {
            return Err(Error::shape("weighted_bce", pv.shape(), targets.shape()));
        }
        if weights.len() != pv.rows() {
            return Err(Error::shape("weighted_bce weights", pv.shape(), (weights.len(), 1)));
        }
        let mut total = 0.0;
        for i in 0..pv.rows() {
            let mut row_loss = 0.0;
            for (&pm, &zm) in pv.row(i).iter().zip(targets.row(i)) {
                let pc = pm.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                row_loss -= zm * pc.ln() + (1.0 - zm) * (1.0 - pc).ln();
            }
            total += weights[i] * row_loss;
        }
        let value = Matrix::scalar(total / pv.rows() as f64);
        Ok(self.push(
            value,
            Op::WeightedBce {
                p,
                targets: targets.clone(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// Same loss as [`Tape::weighted_bce`] on `p = sigmoid(s)`, computed from
    /// the logits as `softplus(s) - z s`. Exact where the sigmoid saturates,
    /// so no clamp is needed.
    pub fn weighted_bce_logits(&mut self, s: Var, targets: &Matrix, weights: &[f64]) -> Result<Var> {
        let sv = self.value(s);
        if sv.shape() != targets.shape() {
            return Err(Error::shape("weighted_bce_logits", sv.shape(), targets.shape()));
        }
        if weights.len() != sv.rows() {
            return Err(Error::shape("weighted_bce_logits weights", sv.shape(), (weights.len(), 1)));
        }
        let mut total = 0.0;
        for i in 0..sv.rows() {
            let row_loss: f64 = sv
                .row(i)
                .iter()
                .zip(targets.row(i))
                .map(|(&x, &z)| softplus(x) - z * x)
                .sum();
            total += weights[i] * row_loss;
        }
        let value = Matrix::scalar(total / sv.rows() as f64);
        Ok(self.push(
            value,
            Op::WeightedBceLogits {
                s,
                targets: targets.clone(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::shape("backward", lv.shape(), (1, 1)));
        }
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let acc = |grads: &mut [Option<Matrix>], v: Var, delta: Matrix| match &mut grads[v.0] {
            Some(existing) => existing.axpy(1.0, &delta),
            slot @ None => *slot = Some(delta),
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = g.matmul(&bv.transpose()).expect("matmul grad shape");
                let gb = av.transpose().matmul(g).expect("matmul grad shape");
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::AddRowBias(x, b) => {
                let mut gb = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(grads, *x, g.clone());
                acc(grads, *b, gb);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(grads, *a, g.zip_map(bv, "mul grad", |x, y| x * y).unwrap());
                acc(grads, *b, g.zip_map(av, "mul grad", |x, y| x * y).unwrap());
            }
            Op::Scale(a, c) => acc(grads, *a, g.map(|x| c * x)),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::LeakyRelu(a, slope) => {
                let av = self.value(*a);
                let d = g
                    .zip_map(av, "leaky grad", |gv, x| if x > 0.0 { gv } else { slope * gv })
                    .unwrap();
                acc(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g
                    .zip_map(&node.value, "sigmoid grad", |gv, s| gv * s * (1.0 - s))
                    .unwrap();
                acc(grads, *a, d);
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let d = g
                    .zip_map(av, "relu grad", |gv, x| if x > 0.0 { gv } else { 0.0 })
                    .unwrap();
                acc(grads, *a, d);
            }
            Op::SoftmaxRow(a) => {
                let s = &node.value;
                let mut d = Matrix::zeros(s.rows(), s.cols());
                for r in 0..s.rows() {
                    let dot: f64 = g.row(r).iter().zip(s.row(r)).map(|(x, y)| x * y).sum();
                    for c in 0..s.cols() {
                        d.set(r, c, s.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                acc(grads, *a, d);
            }
            Op::ScaleRows(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let mut gx = g.clone();
                let mut gs = Matrix::zeros(sv.rows(), 1);
                for r in 0..xv.rows() {
                    let k = sv.get(r, 0);
                    let dot: f64 = g.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum();
                    gs.set(r, 0, dot);
                    gx.row_mut(r).iter_mut().for_each(|v| *v *= k);
                }
                acc(grads, *x, gx);
                acc(grads, *s, gs);
            }
            Op::CrossEntropy(logits, labels) => {
                let upstream = g.item();
                let mut d = softmax_rows(self.value(*logits));
                let n = labels.len() as f64;
                for (r, &y) in labels.iter().enumerate() {
                    let row = d.row_mut(r);
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= upstream / n);
                }
                acc(grads, *logits, d);
            }
            Op::SelectRows(a, idx) => {
                let av = self.value(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &v) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                acc(grads, *a, d);
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let k = g.item() / av.len() as f64;
                acc(grads, *a, Matrix::filled(av.rows(), av.cols(), k));
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                acc(grads, *a, Matrix::filled(av.rows(), av.cols(), g.item()));
            }
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                acc(grads, *a, g.clone().reshape(r, c).unwrap());
            }
            Op::GraphPropagate(x, adj) => {
                let m = adj.rows();
                let b = g.cols();
                let adj_t = adj.transpose();
                let mut d = Matrix::zeros(g.rows(), b);
                for block in 0..g.rows() / m {
                    let span = block * m * b..(block + 1) * m * b;
                    matmul_into(
                        adj_t.data(),
                        &g.data()[span.clone()],
                        &mut d.data_mut()[span],
                        m,
                        m,
                        b,
                    );
                }
                acc(grads, *x, d);
            }
            Op::NodeLinear { h, w, b } => {
                let (hv, wv) = (self.value(*h), self.value(*w));
                let m = wv.rows();
                let mut gh = Matrix::zeros(hv.rows(), hv.cols());
                let mut gw = Matrix::zeros(wv.rows(), wv.cols());
                let mut gb = Matrix::zeros(1, m);
                for i in 0..g.rows() {
                    for node in 0..m {
                        let gv = g.get(i, node);
                        if gv == 0.0 {
                            continue;
                        }
                        let row = i * m + node;
                        for k in 0..hv.cols() {
                            gh.set(row, k, gv * wv.get(node, k));
                            gw.data_mut()[node * wv.cols() + k] += gv * hv.get(row, k);
                        }
                        gb.data_mut()[node] += gv;
                    }
                }
                acc(grads, *h, gh);
                acc(grads, *w, gw);
                acc(grads, *b, gb);
            }
            Op::WeightedBce { p, targets, weights } => {
                let pv = self.value(*p);
                let scale = g.item() / pv.rows() as f64;
                let mut d = Matrix::zeros(pv.rows(), pv.cols());
                for i in 0..pv.rows() {
                    for c in 0..pv.cols() {
                        let pm = pv.get(i, c);
                        if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&pm) {
                            continue;
                        }
                        let z = targets.get(i, c);
                        d.set(i, c, -scale * weights[i] * (z / pm - (1.0 - z) / (1.0 - pm)));
                    }
                }
                acc(grads, *p, d);
            }
            Op::WeightedBceLogits { s, targets, weights } => {
                let sv = self.value(*s);
                let scale = g.item() / sv.rows() as f64;
                let mut d = Matrix::zeros(sv.rows(), sv.cols());
                for i in 0..sv.rows() {
                    for c in 0..sv.cols() {
                        let resid = sigmoid_scalar(sv.get(i, c)) - targets.get(i, c);
                        d.set(i, c, scale * weights[i] * resid);
                    }
                }
                acc(grads, *s, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_tape(x: f64) -> (Tape, Var) {
        let mut t = Tape::new();
        let v = t.leaf(Matrix::scalar(x));
        (t, v)
    }

    #[test]
    fn sigmoid_values() {
        let (mut t, x) = scalar_tape(0.0);
        let s = t.sigmoid(x);
        assert_eq!(t.value(s).item(), 0.5);

        let (mut t, x) = scalar_tape(3f64.ln());
        let s = t.sigmoid(x);
        assert!((t.value(s).item() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_rows(&[[-800.0, 800.0]]));
        let s = t.sigmoid(x);
        assert!(t.value(s).is_finite());
        assert_eq!(t.value(s).data(), &[0.0, 1.0]);
    }

    #[test]
    fn leaky_relu_values_and_kink_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_rows(&[[2.0, -1.0, 0.0]]));
        let y = t.leaky_relu(x, 0.01);
        assert_eq!(t.value(y).data(), &[2.0, -0.01, 0.0]);
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).data(), &[1.0, 0.01, 0.01]);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_rows(&[[0.0, 0.0, 0.0]]));
        let s = t.softmax_row(x);
        for &v in t.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = t.leaf(Matrix::from_rows(&[[1000.0, 0.0]]));
        let s = t.softmax_row(x);
        let v = t.value(s);
        assert!(v.is_finite());
        assert!((v.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(v.get(0, 1) < 1e-300);
    }

    #[test]
    fn cross_entropy_two_class_closed_form() {
        let mut t = Tape::new();
        let z = t.leaf(Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]));
        let l = t.cross_entropy(z, &[0, 0]).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((t.value(l).item() - expected).abs() < 1e-15);
        assert!((expected - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut t = Tape::new();
        let z = t.leaf(Matrix::zeros(1, 3));
        assert!(matches!(t.cross_entropy(z, &[3]), Err(Error::Index { .. })));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::zeros(2, 2));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn unused_leaf_gets_zero_gradient_of_its_shape() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::filled(1, 2, 1.0));
        let unused = t.leaf(Matrix::zeros(3, 4));
        let loss = t.sum(x);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(unused), Matrix::zeros(3, 4));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::scalar(2.0));
        let d = t.detach(x);
        let y = t.mul(d, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).item(), 2.0);
    }

    #[test]
    fn graph_propagate_identity_adjacency() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]]));
        let y = t.graph_propagate(x, Arc::new(Matrix::identity(2))).unwrap();
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn bce_logits_agrees_with_probability_form() {
        let s = Matrix::from_rows(&[[-3.0, 0.2, 1.5], [0.0, 2.5, -0.7]]);
        let z = Matrix::from_rows(&[[0.0, 1.0, 1.0], [1.0, 0.0, 0.0]]);
        let w = [0.3, 0.9];
        let mut t = Tape::new();
        let sv = t.leaf(s.clone());
        let p = t.sigmoid(sv);
        let a = t.weighted_bce(p, &z, &w).unwrap();
        let b = t.weighted_bce_logits(sv, &z, &w).unwrap();
        assert!((t.value(a).item() - t.value(b).item()).abs() < 1e-14);
    }

    #[test]
    fn bce_logits_saturated() {
        let mut t = Tape::new();
        let s = t.leaf(Matrix::from_rows(&[[60.0, -60.0]]));
        let l = t.weighted_bce_logits(s, &Matrix::from_rows(&[[0.0, 1.0]]), &[1.0]).unwrap();
        assert_eq!(t.value(l).item(), 120.0);
        let g = t.backward(l).unwrap().get(s);
        assert_eq!(g.data(), &[1.0, -1.0]);
    }

    #[test]
    fn weighted_bce_half_probability() {
        let mut t = Tape::new();
        let p = t.leaf(Matrix::scalar(0.5));
        let l = t.weighted_bce(p, &Matrix::scalar(1.0), &[1.0]).unwrap();
        assert!((t.value(l).item() - 2f64.ln()).abs() < 1e-15);
    }
}
