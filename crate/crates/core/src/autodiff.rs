// Copyright 2026 The peftsearch Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is built symbolically, evaluated with [`Graph::forward`]
//! against named input bindings, and differentiated with
//! [`Graph::backward`]. Storage is dense and row-major. The only
//! broadcasting supported is a trailing-axis vector (bias style) or a
//! single-element tensor (scalar style) on the right-hand side of
//! [`Graph::add`] and [`Graph::mul`].

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidTensor(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} holds {n} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zero extent")
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![1], vec![v]).unwrap()
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self::new(vec![values.len()], values).expect("empty vector")
    }

    pub fn requiring_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::InvalidTensor(format!(
                "gradient length {} does not match tensor length {}",
                grad.len(),
                self.values.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.values.len(), 1);
        self.values[0]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Constant(Tensor),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Softmax(NodeId),
    LayerNorm(NodeId, f64),
    Gelu(NodeId),
    Embedding { table: NodeId, ids: Vec<usize> },
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
    Sum(NodeId),
    Reshape(NodeId, Vec<usize>),
    SplitHeads { x: NodeId, batch: usize, seq: usize, heads: usize },
    MergeHeads { x: NodeId, batch: usize, seq: usize, heads: usize },
    Transpose(NodeId),
    MeanPool { x: NodeId, seq: usize },
    SliceCols(NodeId, usize),
    SliceRows(NodeId, usize),
    Pick(NodeId, usize),
    HardOneHot(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Embedding { .. } => "embedding",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
            Op::Reshape(..) => "reshape",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::Transpose(_) => "transpose",
            Op::MeanPool { .. } => "mean_pool",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::Pick(..) => "pick",
            Op::HardOneHot(_) => "hard_one_hot",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Input(_) | Op::Constant(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Softmax(a)
            | Op::LayerNorm(a, _)
            | Op::Gelu(a)
            | Op::Sum(a)
            | Op::Reshape(a, _)
            | Op::Transpose(a)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::Pick(a, _)
            | Op::HardOneHot(a) => vec![a],
            Op::Embedding { table, .. } => vec![table],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::SplitHeads { x, .. } | Op::MergeHeads { x, .. } | Op::MeanPool { x, .. } => {
                vec![x]
            }
        }
    }
}

/// Named input bindings for [`Graph::forward`].
pub type Bindings = HashMap<String, Tensor>;

/// Gradients of the loss with respect to every bound input that requires one,
/// keyed by input name.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

/// Symbolic computation graph. Nodes are appended in topological order, so
/// every input of a node has a smaller id.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    ops: Vec<Op>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    needs_grad: Vec<bool>,
    evaluated: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.evaluated = false;
        self.ops.push(op);
        NodeId(self.ops.len() - 1)
    }

    /// Placeholder bound by name at forward time. Whether it receives a
    /// gradient is decided by the bound tensor's `requires_grad`.
    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Input(name.into()))
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Constant(t))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }

    /// Normalization over the last axis without affine parameters.
    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LayerNorm(a, LAYER_NORM_EPS))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Gelu(a))
    }

    pub fn embedding(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        self.push(Op::Embedding { table, ids })
    }

    /// Mean cross-entropy of `[batch, classes]` logits.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> NodeId {
        self.push(Op::CrossEntropy { logits, labels })
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        self.push(Op::Reshape(a, shape))
    }

    /// `[batch * seq, heads * hd]` to `[batch * heads, seq, hd]`.
    pub fn split_heads(&mut self, x: NodeId, batch: usize, seq: usize, heads: usize) -> NodeId {
        self.push(Op::SplitHeads {
            x,
            batch,
            seq,
            heads,
        })
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: NodeId, batch: usize, seq: usize, heads: usize) -> NodeId {
        self.push(Op::MergeHeads {
            x,
            batch,
            seq,
            heads,
        })
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }

    /// `[batch * seq, d]` to `[batch, d]` by averaging over each sequence.
    pub fn mean_pool(&mut self, x: NodeId, seq: usize) -> NodeId {
        self.push(Op::MeanPool { x, seq })
    }

    /// Leading `n` columns of a matrix.
    pub fn slice_cols(&mut self, a: NodeId, n: usize) -> NodeId {
        self.push(Op::SliceCols(a, n))
    }

    /// Leading `n` rows of a matrix.
    pub fn slice_rows(&mut self, a: NodeId, n: usize) -> NodeId {
        self.push(Op::SliceRows(a, n))
    }

    /// Single element (row-major flat index) as a `[1]` tensor.
    pub fn pick(&mut self, a: NodeId, index: usize) -> NodeId {
        self.push(Op::Pick(a, index))
    }

    /// One-hot of the argmax over the last axis (ties to the lower index).
    /// The backward pass is the identity (straight-through estimator).
    pub fn hard_one_hot(&mut self, a: NodeId) -> NodeId {
        self.push(Op::HardOneHot(a))
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.shapes[id.0].clone(), self.values[id.0].clone()).expect("node tensor")
    }

    pub fn is_evaluated(&self) -> bool {
        self.evaluated
    }

    /// Names of all input placeholders, in creation order.
    pub fn input_names(&self) -> Vec<&str> {
        self.ops
            .iter()
            .filter_map(|op| match op {
                Op::Input(name) => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Evaluates every node. Activations are kept for [`Graph::backward`].
    pub fn forward(&mut self, bindings: &Bindings) -> Result<()> {
        let n = self.ops.len();
        self.evaluated = false;
        self.shapes.clear();
        self.values.clear();
        self.needs_grad.clear();
        self.shapes.reserve(n);
        self.values.reserve(n);
        self.needs_grad.reserve(n);
        for i in 0..n {
            // Nodes only ever reference earlier nodes, so one pass suffices.
            debug_assert!(self.ops[i].inputs().iter().all(|a| a.0 < i));
            let (shape, values, needs_grad) = self.eval_node(i, bindings)?;
            debug_assert_eq!(shape.iter().product::<usize>(), values.len());
            self.shapes.push(shape);
            self.values.push(values);
            self.needs_grad.push(needs_grad);
        }
        self.evaluated = true;
        Ok(())
    }

    fn mismatch(&self, node: usize, expected: String, actual: String) -> Error {
        Error::ShapeMismatch {
            node,
            op: self.ops[node].name(),
            expected,
            actual,
        }
    }

    fn broadcast_kind(&self, node: usize, a: NodeId, b: NodeId) -> Result<Broadcast> {
        let sa = &self.shapes[a.0];
        let sb = &self.shapes[b.0];
        if sa == sb {
            Ok(Broadcast::Same)
        } else if sb.len() == 1 && sb[0] == *sa.last().unwrap() {
            Ok(Broadcast::Row)
        } else if sb.len() == 1 && sb[0] == 1 {
            Ok(Broadcast::Scalar)
        } else {
            Err(self.mismatch(
                node,
                format!("{sa:?}, [{}] or [1]", sa.last().unwrap()),
                format!("{sb:?}"),
            ))
        }
    }

    fn eval_node(&self, i: usize, bindings: &Bindings) -> Result<(Vec<usize>, Vec<f64>, bool)> {
        let ng = |id: NodeId| self.needs_grad[id.0];
        let out = match &self.ops[i] {
            Op::Input(name) => {
                let t = bindings
                    .get(name)
                    .ok_or_else(|| Error::UnboundInput(name.clone()))?;
                (t.shape.clone(), t.values.clone(), t.requires_grad)
            }
            Op::Constant(t) => (t.shape.clone(), t.values.clone(), false),
            &Op::MatMul(a, b) => {
                let (sa, sb) = (&self.shapes[a.0], &self.shapes[b.0]);
                let (batch, m, k, n) = match (sa.len(), sb.len()) {
                    (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1]),
                    (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (sa[0], sa[1], sa[2], sb[2]),
                    _ => {
                        return Err(self.mismatch(
                            i,
                            format!("[m, k]·[k, n] or [b, m, k]·[b, k, n] with lhs {sa:?}"),
                            format!("{sb:?}"),
                        ))
                    }
                };
                let (va, vb) = (&self.values[a.0], &self.values[b.0]);
                let mut out = vec![0.0; batch * m * n];
                for bt in 0..batch {
                    matmul_acc(
                        &va[bt * m * k..(bt + 1) * m * k],
                        &vb[bt * k * n..(bt + 1) * k * n],
                        &mut out[bt * m * n..(bt + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
                let shape = if sa.len() == 2 {
                    vec![m, n]
                } else {
                    vec![batch, m, n]
                };
                (shape, out, ng(a) || ng(b))
            }
            &Op::Add(a, b) | &Op::Mul(a, b) => {
                let bc = self.broadcast_kind(i, a, b)?;
                let is_add = matches!(self.ops[i], Op::Add(..));
                let (va, vb) = (&self.values[a.0], &self.values[b.0]);
                let f = |x: f64, y: f64| if is_add { x + y } else { x * y };
                let out: Vec<f64> = match bc {
                    Broadcast::Same => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
                    Broadcast::Row => {
                        let w = vb.len();
                        va.iter()
                            .enumerate()
                            .map(|(j, &x)| f(x, vb[j % w]))
                            .collect()
                    }
                    Broadcast::Scalar => va.iter().map(|&x| f(x, vb[0])).collect(),
                };
                (self.shapes[a.0].clone(), out, ng(a) || ng(b))
            }
            &Op::Scale(a, c) => (
                self.shapes[a.0].clone(),
                self.values[a.0].iter().map(|x| x * c).collect(),
                ng(a),
            ),
            &Op::Softmax(a) => {
                let w = *self.shapes[a.0].last().unwrap();
                let mut out = self.values[a.0].clone();
                out.chunks_mut(w).for_each(softmax_in_place);
                (self.shapes[a.0].clone(), out, ng(a))
            }
            &Op::LayerNorm(a, eps) => {
                let w = *self.shapes[a.0].last().unwrap();
                let mut out = self.values[a.0].clone();
                for row in out.chunks_mut(w) {
                    let (mean, rstd) = moments(row, eps);
                    row.iter_mut().for_each(|x| *x = (*x - mean) * rstd);
                }
                (self.shapes[a.0].clone(), out, ng(a))
            }
            &Op::Gelu(a) => (
                self.shapes[a.0].clone(),
                self.values[a.0].iter().map(|&x| gelu(x)).collect(),
                ng(a),
            ),
            Op::Embedding { table, ids } => {
                let st = &self.shapes[table.0];
                if st.len() != 2 {
                    return Err(self.mismatch(i, "[vocab, dim]".into(), format!("{st:?}")));
                }
                let (vocab, dim) = (st[0], st[1]);
                if let Some(&bad) = ids.iter().find(|&&t| t >= vocab) {
                    return Err(self.mismatch(
                        i,
                        format!("token ids < {vocab}"),
                        format!("id {bad}"),
                    ));
                }
                if ids.is_empty() {
                    return Err(self.mismatch(i, "at least one id".into(), "0 ids".into()));
                }
                let vt = &self.values[table.0];
                let mut out = Vec::with_capacity(ids.len() * dim);
                for &t in ids {
                    out.extend_from_slice(&vt[t * dim..(t + 1) * dim]);
                }
                (vec![ids.len(), dim], out, ng(*table))
            }
            Op::CrossEntropy { logits, labels } => {
                let s = &self.shapes[logits.0];
                if s.len() != 2 || s[0] != labels.len() {
                    return Err(self.mismatch(
                        i,
                        format!("[{}, classes]", labels.len()),
                        format!("{s:?}"),
                    ));
                }
                let c = s[1];
                if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
                    return Err(self.mismatch(i, format!("labels < {c}"), format!("label {bad}")));
                }
                let v = &self.values[logits.0];
                let mut total = 0.0;
                for (row, &l) in v.chunks(c).zip(labels) {
                    total += log_sum_exp(row) - row[l];
                }
                (vec![1], vec![total / labels.len() as f64], ng(*logits))
            }
            &Op::Sum(a) => (vec![1], vec![self.values[a.0].iter().sum()], ng(a)),
            Op::Reshape(a, shape) => {
                let n: usize = shape.iter().product();
                if n != self.values[a.0].len() || shape.contains(&0) {
                    return Err(self.mismatch(
                        i,
                        format!("{} elements", self.values[a.0].len()),
                        format!("{shape:?}"),
                    ));
                }
                (shape.clone(), self.values[a.0].clone(), ng(*a))
            }
            &Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let s = &self.shapes[x.0];
                if s.len() != 2 || s[0] != batch * seq || heads == 0 || s[1] % heads != 0 {
                    return Err(self.mismatch(
                        i,
                        format!("[{}, multiple of {heads}]", batch * seq),
                        format!("{s:?}"),
                    ));
                }
                let hd = s[1] / heads;
                let mut out = vec![0.0; s[0] * s[1]];
                split_heads_map(batch, seq, heads, hd, |src, dst| {
                    out[dst] = self.values[x.0][src]
                });
                (vec![batch * heads, seq, hd], out, ng(x))
            }
            &Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let s = &self.shapes[x.0];
                if s.len() != 3 || s[0] != batch * heads || s[1] != seq {
                    return Err(self.mismatch(
                        i,
                        format!("[{}, {seq}, hd]", batch * heads),
                        format!("{s:?}"),
                    ));
                }
                let hd = s[2];
                let mut out = vec![0.0; batch * seq * heads * hd];
                split_heads_map(batch, seq, heads, hd, |src, dst| {
                    out[src] = self.values[x.0][dst]
                });
                (vec![batch * seq, heads * hd], out, ng(x))
            }
            &Op::Transpose(a) => {
                let s = &self.shapes[a.0];
                if s.len() < 2 {
                    return Err(self.mismatch(i, "rank >= 2".into(), format!("{s:?}")));
                }
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let v = &self.values[a.0];
                let mut out = vec![0.0; v.len()];
                for (blk, oblk) in v.chunks(r * c).zip(out.chunks_mut(r * c)) {
                    for p in 0..r {
                        for q in 0..c {
                            oblk[q * r + p] = blk[p * c + q];
                        }
                    }
                }
                let mut shape = s.clone();
                let l = shape.len();
                shape.swap(l - 2, l - 1);
                (shape, out, ng(a))
            }
            &Op::MeanPool { x, seq } => {
                let s = &self.shapes[x.0];
                if s.len() != 2 || seq == 0 || s[0] % seq != 0 {
                    return Err(self.mismatch(
                        i,
                        format!("[multiple of {seq}, d]"),
                        format!("{s:?}"),
                    ));
                }
                let (rows, d) = (s[0], s[1]);
                let batch = rows / seq;
                let v = &self.values[x.0];
                let mut out = vec![0.0; batch * d];
                for b in 0..batch {
                    for t in 0..seq {
                        let row = &v[(b * seq + t) * d..(b * seq + t + 1) * d];
                        for (o, &x) in out[b * d..(b + 1) * d].iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                }
                let inv = 1.0 / seq as f64;
                out.iter_mut().for_each(|o| *o *= inv);
                (vec![batch, d], out, ng(x))
            }
            &Op::SliceCols(a, n) => {
                let s = &self.shapes[a.0];
                if s.len() != 2 || n == 0 || n > s[1] {
                    return Err(self.mismatch(i, format!("[m, >= {n}]"), format!("{s:?}")));
                }
                let (m, cols) = (s[0], s[1]);
                let v = &self.values[a.0];
                let mut out = Vec::with_capacity(m * n);
                for r in 0..m {
                    out.extend_from_slice(&v[r * cols..r * cols + n]);
                }
                (vec![m, n], out, ng(a))
            }
            &Op::SliceRows(a, n) => {
                let s = &self.shapes[a.0];
                if s.len() != 2 || n == 0 || n > s[0] {
                    return Err(self.mismatch(i, format!("[>= {n}, k]"), format!("{s:?}")));
                }
                (vec![n, s[1]], self.values[a.0][..n * s[1]].to_vec(), ng(a))
            }
            &Op::Pick(a, idx) => {
                let v = &self.values[a.0];
                if idx >= v.len() {
                    return Err(self.mismatch(
                        i,
                        format!("index < {}", v.len()),
                        format!("index {idx}"),
                    ));
                }
                (vec![1], vec![v[idx]], ng(a))
            }
            &Op::HardOneHot(a) => {
                let w = *self.shapes[a.0].last().unwrap();
                let mut out = vec![0.0; self.values[a.0].len()];
                for (row, orow) in self.values[a.0].chunks(w).zip(out.chunks_mut(w)) {
                    orow[argmax(row)] = 1.0;
                }
                (self.shapes[a.0].clone(), out, ng(a))
            }
        };
        Ok(out)
    }

    /// Reverse-mode pass from a scalar `loss` node. Returns a gradient for
    /// every bound input whose tensor has `requires_grad`; inputs the loss
    /// does not depend on get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.evaluated {
            return Err(Error::BackwardBeforeForward);
        }
        if self.values[loss.0].len() != 1 {
            return Err(Error::NonScalarLoss(self.shapes[loss.0].clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.needs_grad[i] {
                continue;
            }
            self.backprop_node(i, g, &mut grads, &mut out);
        }

        for (i, op) in self.ops.iter().enumerate() {
            if let Op::Input(name) = op {
                if self.needs_grad[i] && !out.contains_key(name) {
                    out.insert(name.clone(), Tensor::zeros(self.shapes[i].clone()));
                }
            }
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        i: usize,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        let val = |id: NodeId| self.values[id.0].as_slice();
        let wants = |id: NodeId| self.needs_grad[id.0];
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !self.needs_grad[id.0] {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.values[id.0].len()]);
            f(slot);
        };

        match &self.ops[i] {
            Op::Input(name) => {
                let t = Tensor::new(self.shapes[i].clone(), g).expect("grad shape");
                out.insert(name.clone(), t);
            }
            Op::Constant(_) => {}
            &Op::MatMul(a, b) => {
                let (sa, sb) = (&self.shapes[a.0], &self.shapes[b.0]);
                let (batch, m, k, n) = if sa.len() == 2 {
                    (1, sa[0], sa[1], sb[1])
                } else {
                    (sa[0], sa[1], sa[2], sb[2])
                };
                let (va, vb) = (val(a), val(b));
                if wants(a) {
                    acc(a, &mut |ga| {
                        for bt in 0..batch {
                            let gb = &g[bt * m * n..(bt + 1) * m * n];
                            let bb = &vb[bt * k * n..(bt + 1) * k * n];
                            let gab = &mut ga[bt * m * k..(bt + 1) * m * k];
                            for r in 0..m {
                                let grow = &gb[r * n..(r + 1) * n];
                                for p in 0..k {
                                    let brow = &bb[p * n..(p + 1) * n];
                                    gab[r * k + p] += dot(grow, brow);
                                }
                            }
                        }
                    });
                }
                if wants(b) {
                    acc(b, &mut |gbm| {
                        for bt in 0..batch {
                            let gb = &g[bt * m * n..(bt + 1) * m * n];
                            let ab = &va[bt * m * k..(bt + 1) * m * k];
                            let gbb = &mut gbm[bt * k * n..(bt + 1) * k * n];
                            for r in 0..m {
                                let grow = &gb[r * n..(r + 1) * n];
                                for p in 0..k {
                                    let x = ab[r * k + p];
                                    if x != 0.0 {
                                        axpy(x, grow, &mut gbb[p * n..(p + 1) * n]);
                                    }
                                }
                            }
                        }
                    });
                }
            }
            &Op::Add(a, b) | &Op::Mul(a, b) => {
                let is_add = matches!(self.ops[i], Op::Add(..));
                let bc = self
                    .broadcast_kind(i, a, b)
                    .expect("shapes validated in forward");
                let (va, vb) = (val(a), val(b));
                let w = vb.len();
                acc(a, &mut |ga| {
                    for (j, x) in ga.iter_mut().enumerate() {
                        let scale = if is_add {
                            1.0
                        } else {
                            match bc {
                                Broadcast::Same => vb[j],
                                Broadcast::Row => vb[j % w],
                                Broadcast::Scalar => vb[0],
                            }
                        };
                        *x += g[j] * scale;
                    }
                });
                acc(b, &mut |gb| {
                    for (j, &gj) in g.iter().enumerate() {
                        let d = if is_add { gj } else { gj * va[j] };
                        match bc {
                            Broadcast::Same => gb[j] += d,
                            Broadcast::Row => gb[j % w] += d,
                            Broadcast::Scalar => gb[0] += d,
                        }
                    }
                });
            }
            &Op::Scale(a, c) => acc(a, &mut |ga| {
                ga.iter_mut().zip(&g).for_each(|(x, &gj)| *x += gj * c);
            }),
            &Op::Softmax(a) => {
                let y = &self.values[i];
                let w = *self.shapes[i].last().unwrap();
                acc(a, &mut |ga| {
                    for ((yr, gr), gar) in y.chunks(w).zip(g.chunks(w)).zip(ga.chunks_mut(w)) {
                        let s = dot(yr, gr);
                        for j in 0..w {
                            gar[j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            &Op::LayerNorm(a, eps) => {
                let xhat = &self.values[i];
                let x = val(a);
                let w = *self.shapes[i].last().unwrap();
                acc(a, &mut |ga| {
                    for ((xr, (hr, gr)), gar) in x
                        .chunks(w)
                        .zip(xhat.chunks(w).zip(g.chunks(w)))
                        .zip(ga.chunks_mut(w))
                    {
                        let (_, rstd) = moments(xr, eps);
                        let mg = gr.iter().sum::<f64>() / w as f64;
                        let mgh = dot(gr, hr) / w as f64;
                        for j in 0..w {
                            gar[j] += rstd * (gr[j] - mg - hr[j] * mgh);
                        }
                    }
                });
            }
            &Op::Gelu(a) => {
                let x = val(a);
                acc(a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * gelu_grad(x[j]);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let dim = self.shapes[table.0][1];
                acc(*table, &mut |gt| {
                    for (r, &t) in ids.iter().enumerate() {
                        axpy(1.0, &g[r * dim..(r + 1) * dim], &mut gt[t * dim..(t + 1) * dim]);
                    }
                });
            }
            Op::CrossEntropy { logits, labels } => {
                let c = self.shapes[logits.0][1];
                let v = val(*logits);
                let scale = g[0] / labels.len() as f64;
                acc(*logits, &mut |gl| {
                    for ((row, grow), &l) in v.chunks(c).zip(gl.chunks_mut(c)).zip(labels) {
                        let mut p = row.to_vec();
                        softmax_in_place(&mut p);
                        for j in 0..c {
                            let t = if j == l { 1.0 } else { 0.0 };
                            grow[j] += scale * (p[j] - t);
                        }
                    }
                });
            }
            &Op::Sum(a) => acc(a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Reshape(a, _) => acc(*a, &mut |ga| axpy(1.0, &g, ga)),
            &Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let hd = self.shapes[i][2];
                acc(x, &mut |gx| {
                    split_heads_map(batch, seq, heads, hd, |src, dst| gx[src] += g[dst])
                });
            }
            &Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let hd = self.shapes[x.0][2];
                acc(x, &mut |gx| {
                    split_heads_map(batch, seq, heads, hd, |src, dst| gx[dst] += g[src])
                });
            }
            &Op::Transpose(a) => {
                let s = &self.shapes[a.0];
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                acc(a, &mut |ga| {
                    for (gblk, gablk) in g.chunks(r * c).zip(ga.chunks_mut(r * c)) {
                        for p in 0..r {
                            for q in 0..c {
                                gablk[p * c + q] += gblk[q * r + p];
                            }
                        }
                    }
                });
            }
            &Op::MeanPool { x, seq } => {
                let d = self.shapes[x.0][1];
                let inv = 1.0 / seq as f64;
                acc(x, &mut |gx| {
                    for (r, row) in gx.chunks_mut(d).enumerate() {
                        let b = r / seq;
                        axpy(inv, &g[b * d..(b + 1) * d], row);
                    }
                });
            }
            &Op::SliceCols(a, n) => {
                let cols = self.shapes[a.0][1];
                acc(a, &mut |ga| {
                    for (r, grow) in g.chunks(n).enumerate() {
                        axpy(1.0, grow, &mut ga[r * cols..r * cols + n]);
                    }
                });
            }
            &Op::SliceRows(a, _) => acc(a, &mut |ga| axpy(1.0, &g, &mut ga[..g.len()])),
            &Op::Pick(a, idx) => acc(a, &mut |ga| ga[idx] += g[0]),
            &Op::HardOneHot(a) => acc(a, &mut |ga| axpy(1.0, &g, ga)),
        }
    }
}

/// Max over entries of `|analytic - central difference| / (|central| + 1e-12)`
/// for the gradient of `loss` with respect to input `param`.
pub fn finite_diff_check(
    graph: &mut Graph,
    bindings: &Bindings,
    loss: NodeId,
    param: &str,
    step: f64,
) -> Result<f64> {
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::InvalidTensor(format!(
            "finite-difference step must lie in (0, 1e-2], got {step}"
        )));
    }
    let mut b = bindings.clone();
    let base = b
        .get(param)
        .ok_or_else(|| Error::UnboundInput(param.to_string()))?
        .clone();
    b.insert(param.to_string(), base.clone().requiring_grad(true));
    graph.forward(&b)?;
    let analytic = graph.backward(loss)?.remove(param).expect("param bound");

    let mut worst: f64 = 0.0;
    for j in 0..base.len() {
        let mut eval_at = |delta: f64| -> Result<f64> {
            let mut t = base.clone();
            t.values[j] += delta;
            b.insert(param.to_string(), t);
            graph.forward(&b)?;
            Ok(graph.value(loss)[0])
        };
        let numeric = (eval_at(step)? - eval_at(-step)?) / (2.0 * step);
        let err = (analytic.values[j] - numeric).abs() / (numeric.abs() + 1e-12);
        worst = worst.max(err);
    }
    b.insert(param.to_string(), base);
    graph.forward(&b)?;
    Ok(worst)
}

fn split_heads_map(
    batch: usize,
    seq: usize,
    heads: usize,
    hd: usize,
    mut f: impl FnMut(usize, usize),
) {
    let d = heads * hd;
    for b in 0..batch {
        for h in 0..heads {
            for s in 0..seq {
                for e in 0..hd {
                    let src = (b * seq + s) * d + h * hd + e;
                    let dst = ((b * heads + h) * seq + s) * hd + e;
                    f(src, dst);
                }
            }
        }
    }
}

/// `out += a · b` for row-major `[m, k] · [k, n]`.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for p in 0..k {
            let x = a[r * k + p];
            if x != 0.0 {
                axpy(x, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

/// Row softmax of a slice, returned as a new vector.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut p = row.to_vec();
    softmax_in_place(&mut p);
    p
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = j;
        }
    }
    best
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
