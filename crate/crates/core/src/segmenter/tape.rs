//! Minimal reverse-mode differentiation over [`Matrix`] values.
//!
//! Nodes are appended in evaluation order, so reverse index order is a valid
//! topological order for the backward sweep. Gradients are only tracked for
//! nodes that depend on a trainable leaf.

use std::collections::HashMap;
use std::sync::Arc;

use super::tensor::{matmul, matmul_at, matmul_bt, Matrix, SparseMix};
use crate::scalar::Scalar;

pub type NodeId = usize;

/// Identifies a parameter owned by the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKey {
    Base(usize),
    LoraA(usize),
    LoraB(usize),
}

enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm(NodeId, Vec<T>),
    Mix(NodeId, Arc<SparseMix<T>>),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize),
    L2NormalizeRows(NodeId, Vec<T>),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    tracked: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamKey, NodeId>,
    leaf_params: HashMap<NodeId, ParamKey>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            leaf_params: HashMap::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, tracked: bool) -> NodeId {
        self.nodes.push(Node { value, op, tracked });
        self.nodes.len() - 1
    }

    fn tracked(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].tracked)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Parameter leaf, created once per graph.
    pub fn param(&mut self, key: ParamKey, value: &Matrix<T>, trainable: bool) -> NodeId {
        if let Some(&id) = self.params.get(&key) {
            return id;
        }
        let id = self.push(value.clone(), Op::Leaf, trainable);
        self.params.insert(key, id);
        if trainable {
            self.leaf_params.insert(id, key);
        }
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.value(a), self.value(b));
        let t = self.tracked(&[a, b]);
        self.push(v, Op::MatMul(a, b), t)
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul_bt(self.value(a), self.value(b));
        let t = self.tracked(&[a, b]);
        self.push(v, Op::MatMulBt(a, b), t)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let t = self.tracked(&[a, b]);
        self.push(v, Op::Add(a, b), t)
    }

    /// Adds row vector `b` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let bv = self.value(b).as_slice().to_vec();
        assert_eq!(self.value(a).cols(), bv.len(), "add_row width");
        let mut v = self.value(a).clone();
        let cols = v.cols();
        for (i, x) in v.as_mut_slice().iter_mut().enumerate() {
            *x += bv[i % cols];
        }
        let t = self.tracked(&[a, b]);
        self.push(v, Op::AddRow(a, b), t)
    }

    /// Multiplies every row of `a` elementwise by row vector `b`.
    pub fn mul_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let bv = self.value(b).as_slice().to_vec();
        assert_eq!(self.value(a).cols(), bv.len(), "mul_row width");
        let mut v = self.value(a).clone();
        let cols = v.cols();
        for (i, x) in v.as_mut_slice().iter_mut().enumerate() {
            *x *= bv[i % cols];
        }
        let t = self.tracked(&[a, b]);
        self.push(v, Op::MulRow(a, b), t)
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let mut v = self.value(a).clone();
        for x in v.as_mut_slice() {
            *x *= s;
        }
        let t = self.tracked(&[a]);
        self.push(v, Op::Scale(a, s), t)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for x in v.as_mut_slice() {
            *x = x.max(T::zero());
        }
        let t = self.tracked(&[a]);
        self.push(v, Op::Relu(a), t)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let t = self.tracked(&[a]);
        self.push(v, Op::SoftmaxRows(a), t)
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        let n = T::from_usize(v.cols()).unwrap();
        let mut inv_std = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let is = T::one() / (var + T::lit(LN_EPS)).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        let t = self.tracked(&[a]);
        self.push(v, Op::LayerNorm(a, inv_std), t)
    }

    pub fn mix(&mut self, a: NodeId, mix: Arc<SparseMix<T>>) -> NodeId {
        let v = mix.apply(self.value(a));
        let t = self.tracked(&[a]);
        self.push(v, Op::Mix(a, mix), t)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width");
            rows += v.rows();
            data.extend_from_slice(v.as_slice());
        }
        let v = Matrix::from_vec(rows, cols, data).expect("concat shape");
        let t = self.tracked(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), t)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let src = self.value(a);
        let cols = src.cols();
        let data = src.as_slice()[start * cols..(start + len) * cols].to_vec();
        let v = Matrix::from_vec(len, cols, data).expect("slice shape");
        let t = self.tracked(&[a]);
        self.push(v, Op::SliceRows(a, start), t)
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        let mut norms = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let n = row.iter().map(|&x| x * x).sum::<T>().sqrt().max(T::lit(1e-12));
            for x in row.iter_mut() {
                *x /= n;
            }
            norms.push(n);
        }
        let t = self.tracked(&[a]);
        self.push(v, Op::L2NormalizeRows(a, norms), t)
    }

    /// Back-propagates the given output gradients and returns the gradient
    /// of every trainable parameter leaf reached.
    pub fn backward(&self, seeds: &[(NodeId, Matrix<T>)]) -> HashMap<ParamKey, Matrix<T>> {
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let accumulate = |grads: &mut Vec<Option<Matrix<T>>>, id: NodeId, g: Matrix<T>| {
            if !self.nodes[id].tracked {
                return;
            }
            match &mut grads[id] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        for (id, g) in seeds {
            assert_eq!(self.value(*id).shape(), g.shape(), "seed gradient shape");
            accumulate(&mut grads, *id, g.clone());
        }
        let mut out = HashMap::new();
        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    if let Some(&key) = self.leaf_params.get(&id) {
                        out.insert(key, g);
                    }
                }
                Op::MatMul(a, b) => {
                    if self.nodes[*a].tracked {
                        accumulate(&mut grads, *a, matmul_bt(&g, self.value(*b)));
                    }
                    if self.nodes[*b].tracked {
                        accumulate(&mut grads, *b, matmul_at(self.value(*a), &g));
                    }
                }
                Op::MatMulBt(a, b) => {
                    if self.nodes[*a].tracked {
                        accumulate(&mut grads, *a, matmul(&g, self.value(*b)));
                    }
                    if self.nodes[*b].tracked {
                        accumulate(&mut grads, *b, matmul_at(&g, self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[*b].tracked {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, b) => {
                    if self.nodes[*b].tracked {
                        let mut gb = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, &x) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                                *o += x;
                            }
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::MulRow(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b).as_slice();
                    if self.nodes[*b].tracked {
                        let mut gb = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for ((o, &x), &y) in gb.as_mut_slice().iter_mut().zip(g.row(r)).zip(av.row(r)) {
                                *o += x * y;
                            }
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                    if self.nodes[*a].tracked {
                        let mut ga = g;
                        let cols = ga.cols();
                        for (i, x) in ga.as_mut_slice().iter_mut().enumerate() {
                            *x *= bv[i % cols];
                        }
                        accumulate(&mut grads, *a, ga);
                    }
                }
                Op::Scale(a, s) => {
                    let mut ga = g;
                    for x in ga.as_mut_slice() {
                        *x *= *s;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    for (x, &y) in ga.as_mut_slice().iter_mut().zip(node.value.as_slice()) {
                        if y <= T::zero() {
                            *x = T::zero();
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g;
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let dot: T = ga.row(r).iter().zip(yr).map(|(&gi, &yi)| gi * yi).sum();
                        for (gi, &yi) in ga.row_mut(r).iter_mut().zip(yr) {
                            *gi = yi * (*gi - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm(a, inv_std) => {
                    let y = &node.value;
                    let n = T::from_usize(y.cols()).unwrap();
                    let mut ga = g;
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let mean_g = ga.row(r).iter().copied().sum::<T>() / n;
                        let mean_gy: T = ga.row(r).iter().zip(yr).map(|(&gi, &yi)| gi * yi).sum::<T>() / n;
                        let is = inv_std[r];
                        for (gi, &yi) in ga.row_mut(r).iter_mut().zip(yr) {
                            *gi = is * (*gi - mean_g - yi * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Mix(a, mix) => {
                    accumulate(&mut grads, *a, mix.apply_transpose(&g));
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        if self.nodes[p].tracked {
                            let cols = g.cols();
                            let data = g.as_slice()[start * cols..(start + rows) * cols].to_vec();
                            accumulate(&mut grads, p, Matrix::from_vec(rows, cols, data).unwrap());
                        }
                        start += rows;
                    }
                }
                Op::SliceRows(a, start) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    let cols = src.cols();
                    ga.as_mut_slice()[start * cols..start * cols + g.len()].copy_from_slice(g.as_slice());
                    accumulate(&mut grads, *a, ga);
                }
                Op::L2NormalizeRows(a, norms) => {
                    let y = &node.value;
                    let mut ga = g;
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let dot: T = ga.row(r).iter().zip(yr).map(|(&gi, &yi)| gi * yi).sum();
                        for (gi, &yi) in ga.row_mut(r).iter_mut().zip(yr) {
                            *gi = (*gi - yi * dot) / norms[r];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        out
    }
}
