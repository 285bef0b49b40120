//! Minimal reverse-mode autodiff tape over `ndarray` matrices.
//!
//! Every node holds an `f64` matrix; scalars are 1x1, row vectors 1xN.
//! The op set is exactly what the triplet encoder and its losses need.
//! Gradients are checked against central finite differences in the
//! verification suite.

use ndarray::{s, Array2, Axis};

use crate::{PaitsError, Result};

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// Elementwise add; rhs may be a 1xN row broadcast over lhs rows.
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise mul; rhs may be a 1xN row broadcast over lhs rows.
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Relu(NodeId),
    /// Row-wise softmax; entries where mask == 0 get probability 0.
    RowSoftmax { x: NodeId },
    /// Row-wise layer normalization (no affine).
    LayerNorm(NodeId),
    SumAll(NodeId),
    ConcatCols(NodeId, NodeId),
    SliceCols { x: NodeId, start: usize, end: usize },
    /// Stack 1xN rows into an MxN matrix.
    StackRows(Vec<NodeId>),
    /// Row lookup into an embedding table.
    Gather { table: NodeId, idx: Vec<usize> },
    /// Row-wise L2 normalization.
    RowNormalize(NodeId),
    /// Sum over elements of weights * bce_with_logits(x, targets).
    BceWithLogits {
        logits: NodeId,
        targets: Array2<f64>,
        weights: Array2<f64>,
    },
    /// Sum over rows of cross-entropy against integer targets.
    CrossEntropyRows { logits: NodeId, targets: Vec<usize> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Computation tape. Build a graph forward, then call [`Tape::backward`].
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].value[[0, 0]]
    }

    pub fn leaf(&mut self, v: Array2<f64>) -> NodeId {
        self.push(v, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let v = if vb.nrows() == 1 && va.nrows() > 1 {
            va + &vb.broadcast(va.raw_dim()).unwrap()
        } else {
            va + vb
        };
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let v = if vb.nrows() == 1 && va.nrows() > 1 {
            va * &vb.broadcast(va.raw_dim()).unwrap()
        } else {
            va * vb
        };
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a].value * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn row_softmax(&mut self, x: NodeId, mask: Option<NodeId>) -> NodeId {
        let xv = &self.nodes[x].value;
        let mv = mask.map(|m| self.nodes[m].value.clone());
        let mut out = Array2::zeros(xv.raw_dim());
        for (i, row) in xv.outer_iter().enumerate() {
            let keep = |j: usize| mv.as_ref().is_none_or(|m| m[[i, j]] != 0.0);
            let mx = row
                .iter()
                .enumerate()
                .filter(|(j, _)| keep(*j))
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..row.len() {
                if keep(j) {
                    let e = (row[j] - mx).exp();
                    out[[i, j]] = e;
                    sum += e;
                }
            }
            if sum > 0.0 {
                for j in 0..row.len() {
                    out[[i, j]] /= sum;
                }
            }
        }
        self.push(out, Op::RowSoftmax { x })
    }

    pub fn layer_norm(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let n = xv.ncols() as f64;
        let mut out = xv.clone();
        for mut row in out.outer_iter_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) / sd);
        }
        self.push(out, Op::LayerNorm(x))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.nodes[a].value.sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let vb = &self.nodes[b].value;
        let mut v = Array2::zeros((va.nrows(), va.ncols() + vb.ncols()));
        v.slice_mut(s![.., ..va.ncols()]).assign(va);
        v.slice_mut(s![.., va.ncols()..]).assign(vb);
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.nodes[x].value.slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols { x, start, end })
    }

    pub fn stack_rows(&mut self, rows: Vec<NodeId>) -> NodeId {
        let ncols = self.nodes[rows[0]].value.ncols();
        let mut v = Array2::zeros((rows.len(), ncols));
        for (i, &r) in rows.iter().enumerate() {
            v.row_mut(i).assign(&self.nodes[r].value.row(0));
        }
        self.push(v, Op::StackRows(rows))
    }

    pub fn gather(&mut self, table: NodeId, idx: Vec<usize>) -> NodeId {
        let tv = &self.nodes[table].value;
        let mut v = Array2::zeros((idx.len(), tv.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            v.row_mut(i).assign(&tv.row(r));
        }
        self.push(v, Op::Gather { table, idx })
    }

    pub fn row_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        let mut out = xv.clone();
        for mut row in out.outer_iter_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(PaitsError::Numerical("zero-norm embedding".into()));
            }
            row.mapv_inplace(|v| v / norm);
        }
        Ok(self.push(out, Op::RowNormalize(x)))
    }

    /// Sum_{ij} weights_ij * BCE(logits_ij, targets_ij), numerically stable.
    pub fn bce_with_logits(
        &mut self,
        logits: NodeId,
        targets: Array2<f64>,
        weights: Array2<f64>,
    ) -> NodeId {
        let lv = &self.nodes[logits].value;
        let mut total = 0.0;
        for ((i, j), &x) in lv.indexed_iter() {
            let w = weights[[i, j]];
            if w != 0.0 {
                let y = targets[[i, j]];
                total += w * (x.max(0.0) - x * y + (-x.abs()).exp().ln_1p());
            }
        }
        let v = Array2::from_elem((1, 1), total);
        self.push(v, Op::BceWithLogits { logits, targets, weights })
    }

    /// Sum over rows of cross-entropy of softmax(logits) against `targets`.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let lv = &self.nodes[logits].value;
        let mut total = 0.0;
        for (i, row) in lv.outer_iter().enumerate() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[targets[i]];
        }
        let v = Array2::from_elem((1, 1), total);
        self.push(v, Op::CrossEntropyRows { logits, targets })
    }

    /// Reverse sweep from a scalar loss node. Returns one gradient slot per
    /// node; untouched nodes are `None`.
    pub fn backward(&mut self, loss: NodeId) -> Vec<Option<Array2<f64>>> {
        assert_eq!(self.nodes[loss].value.dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.nodes[b].value.t());
                    let db = self.nodes[a].value.t().dot(&g);
                    accumulate(&mut grads, a, da);
                    accumulate(&mut grads, b, db);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, a, g.t().to_owned());
                }
                Op::Add(a, b) => {
                    let vb = &self.nodes[b].value;
                    if vb.nrows() == 1 && g.nrows() > 1 {
                        let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, b, db);
                    } else {
                        accumulate(&mut grads, b, g.clone());
                    }
                    accumulate(&mut grads, a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, b, -&g);
                    accumulate(&mut grads, a, g);
                }
                Op::Mul(a, b) => {
                    let va = self.nodes[a].value.clone();
                    let vb = self.nodes[b].value.clone();
                    if vb.nrows() == 1 && va.nrows() > 1 {
                        let da = &g * &vb.broadcast(va.raw_dim()).unwrap();
                        let db = (&g * &va).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, a, da);
                        accumulate(&mut grads, b, db);
                    } else {
                        accumulate(&mut grads, a, &g * &vb);
                        accumulate(&mut grads, b, &g * &va);
                    }
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, a, &g * c);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[id].value;
                    accumulate(&mut grads, a, &g * &y.mapv(|v| 1.0 - v * v));
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a].value;
                    accumulate(&mut grads, a, &g * &x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
                }
                Op::RowSoftmax { x } => {
                    let y = &self.nodes[id].value;
                    let mut dx = Array2::zeros(y.raw_dim());
                    for i in 0..y.nrows() {
                        let dot: f64 = (0..y.ncols()).map(|j| g[[i, j]] * y[[i, j]]).sum();
                        for j in 0..y.ncols() {
                            dx[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::LayerNorm(x) => {
                    let xv = &self.nodes[x].value;
                    let y = &self.nodes[id].value;
                    let n = xv.ncols() as f64;
                    let mut dx = Array2::zeros(xv.raw_dim());
                    for i in 0..xv.nrows() {
                        let mean = xv.row(i).sum() / n;
                        let var = xv.row(i).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                        let sd = (var + LN_EPS).sqrt();
                        let gmean: f64 = g.row(i).sum() / n;
                        let gydot: f64 =
                            (0..xv.ncols()).map(|j| g[[i, j]] * y[[i, j]]).sum::<f64>() / n;
                        for j in 0..xv.ncols() {
                            dx[[i, j]] = (g[[i, j]] - gmean - y[[i, j]] * gydot) / sd;
                        }
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::SumAll(a) => {
                    let da = Array2::from_elem(self.nodes[a].value.raw_dim(), g[[0, 0]]);
                    accumulate(&mut grads, a, da);
                }
                Op::ConcatCols(a, b) => {
                    let na = self.nodes[a].value.ncols();
                    accumulate(&mut grads, a, g.slice(s![.., ..na]).to_owned());
                    accumulate(&mut grads, b, g.slice(s![.., na..]).to_owned());
                }
                Op::SliceCols { x, start, end } => {
                    let mut dx = Array2::zeros(self.nodes[x].value.raw_dim());
                    dx.slice_mut(s![.., start..end]).assign(&g);
                    accumulate(&mut grads, x, dx);
                }
                Op::StackRows(rows) => {
                    for (i, &r) in rows.iter().enumerate() {
                        let dr = g.row(i).to_owned().insert_axis(Axis(0));
                        accumulate(&mut grads, r, dr);
                    }
                }
                Op::Gather { table, idx } => {
                    let mut dt = Array2::zeros(self.nodes[table].value.raw_dim());
                    for (i, &r) in idx.iter().enumerate() {
                        let mut row = dt.row_mut(r);
                        row += &g.row(i);
                    }
                    accumulate(&mut grads, table, dt);
                }
                Op::RowNormalize(x) => {
                    let xv = &self.nodes[x].value;
                    let y = &self.nodes[id].value;
                    let mut dx = Array2::zeros(xv.raw_dim());
                    for i in 0..xv.nrows() {
                        let norm = xv.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let ydot: f64 = (0..xv.ncols()).map(|j| g[[i, j]] * y[[i, j]]).sum();
                        for j in 0..xv.ncols() {
                            dx[[i, j]] = (g[[i, j]] - y[[i, j]] * ydot) / norm;
                        }
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::BceWithLogits { logits, targets, weights } => {
                    let lv = &self.nodes[logits].value;
                    let scale = g[[0, 0]];
                    let mut dl = Array2::zeros(lv.raw_dim());
                    for ((i, j), &x) in lv.indexed_iter() {
                        let w = weights[[i, j]];
                        if w != 0.0 {
                            let sig = 1.0 / (1.0 + (-x).exp());
                            dl[[i, j]] = scale * w * (sig - targets[[i, j]]);
                        }
                    }
                    accumulate(&mut grads, logits, dl);
                }
                Op::CrossEntropyRows { logits, targets } => {
                    let lv = &self.nodes[logits].value;
                    let scale = g[[0, 0]];
                    let mut dl = Array2::zeros(lv.raw_dim());
                    for (i, row) in lv.outer_iter().enumerate() {
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
                        for j in 0..row.len() {
                            let p = (row[j] - mx).exp() / sum;
                            let t = if j == targets[i] { 1.0 } else { 0.0 };
                            dl[[i, j]] = scale * (p - t);
                        }
                    }
                    accumulate(&mut grads, logits, dl);
                }
            }
        }
        grads
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
    match &mut grads[id] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}
