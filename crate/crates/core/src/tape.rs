//! Reverse-mode differentiation over whole-matrix primitives.
//!
//! A [`Tape`] records one forward pass as a list of nodes in evaluation
//! order. [`Tape::backward`] walks the list in reverse, so every node is
//! visited once, and accumulates leaf gradients into the
//! [`ParameterStore`] buffers (it never zeroes them).

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::linalg::{dot, sigmoid, softmax_slice, softplus, DenseMatrix};
use crate::params::{ParameterStore, SlotId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Param(SlotId),
    Lookup(Vec<(SlotId, usize)>),
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Hadamard(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Reshape(NodeId),
    IndexRows(NodeId, Vec<usize>),
    Gather(NodeId, Vec<usize>),
    RowDot(NodeId, NodeId),
    RowScale(NodeId, NodeId),
    RowSums(NodeId),
    ColSums(NodeId),
    SumAll(NodeId),
    AddRowBroadcast(NodeId, NodeId),
    ScalarMul(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    SoftmaxAll(NodeId),
    Inner(NodeId, NodeId),
    ConcatRows(Vec<NodeId>),
    AddN(Vec<NodeId>),
    BceWithLogits(NodeId, f64),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: DenseMatrix,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<SlotId, NodeId>,
}

fn same_shape(a: &DenseMatrix, b: &DenseMatrix, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn zip_map(a: &DenseMatrix, b: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> DenseMatrix {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| f(*x, *y))
        .collect();
    DenseMatrix::from_vec(a.rows(), a.cols(), data).expect("shape preserved")
}

fn map(a: &DenseMatrix, f: impl Fn(f64) -> f64) -> DenseMatrix {
    let data = a.data().iter().map(|x| f(*x)).collect();
    DenseMatrix::from_vec(a.rows(), a.cols(), data).expect("shape preserved")
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: DenseMatrix) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Whole-slot leaf; repeated calls on one tape share a node.
    pub fn param(&mut self, store: &ParameterStore, slot: SlotId) -> NodeId {
        if let Some(id) = self.params.get(&slot) {
            return *id;
        }
        let id = self.push(Op::Param(slot), store.value(slot).clone());
        self.params.insert(slot, id);
        id
    }

    /// Stacks the selected rows (slot, row) into a new matrix. Gradients
    /// flow only into the selected rows.
    pub fn lookup(&mut self, store: &ParameterStore, rows: Vec<(SlotId, usize)>) -> Result<NodeId> {
        let first = rows
            .first()
            .ok_or_else(|| Error::contract("lookup of zero rows"))?;
        let cols = store.value(first.0).cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &(slot, r) in &rows {
            let table = store.value(slot);
            if table.cols() != cols {
                return Err(Error::shape("lookup rows of different widths"));
            }
            if r >= table.rows() {
                return Err(Error::contract(format!(
                    "index {r} out of range for `{}` with {} rows",
                    store.slot(slot).name,
                    table.rows()
                )));
            }
            data.extend_from_slice(table.row(r));
        }
        let value = DenseMatrix::from_vec(rows.len(), cols, data)?;
        Ok(self.push(Op::Lookup(rows), value))
    }

    pub fn constant(&mut self, value: DenseMatrix) -> NodeId {
        self.push(Op::Const, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape(self.value(a), self.value(b), "add")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = map(self.value(a), |x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape(self.value(a), self.value(b), "hadamard")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(Op::Hadamard(a, b), v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(Op::MatMulNt(a, b), v))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let v = DenseMatrix::from_vec(rows, cols, self.value(a).data().to_vec())?;
        Ok(self.push(Op::Reshape(a), v))
    }

    /// Flattens to a column vector (row-major order).
    pub fn flatten(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len();
        self.reshape(a, n, 1)
    }

    pub fn index_rows(&mut self, a: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let src = self.value(a);
        if idx.is_empty() {
            return Err(Error::contract("index_rows with no rows"));
        }
        if let Some(bad) = idx.iter().find(|&&r| r >= src.rows()) {
            return Err(Error::contract(format!("row {bad} out of range")));
        }
        let mut data = Vec::with_capacity(idx.len() * src.cols());
        for &r in &idx {
            data.extend_from_slice(src.row(r));
        }
        let v = DenseMatrix::from_vec(idx.len(), src.cols(), data)?;
        Ok(self.push(Op::IndexRows(a, idx), v))
    }

    /// Picks flat (row-major) entries into a `rows x cols` matrix.
    pub fn gather(
        &mut self,
        a: NodeId,
        idx: Vec<usize>,
        rows: usize,
        cols: usize,
    ) -> Result<NodeId> {
        let src = self.value(a);
        if let Some(bad) = idx.iter().find(|&&k| k >= src.len()) {
            return Err(Error::contract(format!("entry {bad} out of range")));
        }
        let data = idx.iter().map(|&k| src.data()[k]).collect();
        let v = DenseMatrix::from_vec(rows, cols, data)?;
        Ok(self.push(Op::Gather(a, idx), v))
    }

    /// Row-wise inner products, `r x 1`.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape(self.value(a), self.value(b), "row_dot")?;
        let (va, vb) = (self.value(a), self.value(b));
        let v = DenseMatrix::column((0..va.rows()).map(|r| dot(va.row(r), vb.row(r))).collect());
        Ok(self.push(Op::RowDot(a, b), v))
    }

    /// Scales row r of `a` by `s[r]` (`s` is `r x 1`).
    pub fn row_scale(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let (va, vs) = (self.value(a), self.value(s));
        if vs.shape() != (va.rows(), 1) {
            return Err(Error::shape(format!(
                "row_scale of {:?} by {:?}",
                va.shape(),
                vs.shape()
            )));
        }
        let mut v = va.clone();
        for r in 0..v.rows() {
            let c = vs.data()[r];
            v.row_mut(r).iter_mut().for_each(|x| *x *= c);
        }
        Ok(self.push(Op::RowScale(a, s), v))
    }

    pub fn row_sums(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let v = DenseMatrix::column((0..va.rows()).map(|r| va.row(r).iter().sum()).collect());
        self.push(Op::RowSums(a), v)
    }

    pub fn col_sums(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut v = DenseMatrix::zeros(1, va.cols());
        for r in 0..va.rows() {
            for (o, x) in v.data_mut().iter_mut().zip(va.row(r)) {
                *o += x;
            }
        }
        self.push(Op::ColSums(a), v)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = DenseMatrix::scalar(self.value(a).data().iter().sum());
        self.push(Op::SumAll(a), v)
    }

    /// Adds the `1 x c` row `b` to every row of `a`.
    pub fn add_row_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.shape() != (1, va.cols()) {
            return Err(Error::shape(format!(
                "broadcast {:?} onto {:?}",
                vb.shape(),
                va.shape()
            )));
        }
        let mut v = va.clone();
        for r in 0..v.rows() {
            for (o, x) in v.row_mut(r).iter_mut().zip(vb.data()) {
                *o += x;
            }
        }
        Ok(self.push(Op::AddRowBroadcast(a, b), v))
    }

    /// `s * a` for a `1 x 1` node `s`.
    pub fn scalar_mul(&mut self, s: NodeId, a: NodeId) -> Result<NodeId> {
        let c = self.value(s).item()?;
        let v = map(self.value(a), |x| x * c);
        Ok(self.push(Op::ScalarMul(s, a), v))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), crate::linalg::relu);
        self.push(Op::Relu(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut v = DenseMatrix::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            let w = softmax_slice(va.row(r));
            v.row_mut(r).copy_from_slice(&w);
        }
        self.push(Op::SoftmaxRows(a), v)
    }

    pub fn softmax_all(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let v = DenseMatrix::from_vec(va.rows(), va.cols(), softmax_slice(va.data()))
            .expect("shape preserved");
        self.push(Op::SoftmaxAll(a), v)
    }

    /// Frobenius inner product, `1 x 1`.
    pub fn inner(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape(self.value(a), self.value(b), "inner")?;
        let v = DenseMatrix::scalar(dot(self.value(a).data(), self.value(b).data()));
        Ok(self.push(Op::Inner(a, b), v))
    }

    /// Vertical stack of equal-width matrices.
    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat of nothing"))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let vp = self.value(p);
            if vp.cols() != cols {
                return Err(Error::shape("concat of different widths"));
            }
            rows += vp.rows();
            data.extend_from_slice(vp.data());
        }
        let v = DenseMatrix::from_vec(rows, cols, data)?;
        Ok(self.push(Op::ConcatRows(parts), v))
    }

    pub fn add_n(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("sum of nothing"))?;
        let mut v = self.value(first).clone();
        for &p in &parts[1..] {
            v.add_assign(self.value(p))?;
        }
        Ok(self.push(Op::AddN(parts), v))
    }

    /// Binary cross-entropy of a `1 x 1` logit against `label`.
    pub fn bce_with_logits(&mut self, logit: NodeId, label: f64) -> Result<NodeId> {
        let z = self.value(logit).item()?;
        let v = DenseMatrix::scalar(softplus(z) - label * z);
        Ok(self.push(Op::BceWithLogits(logit, label), v))
    }

    /// Accumulates d(root)/d(slot) into the store's gradient buffers.
    pub fn backward(&self, root: NodeId, store: &mut ParameterStore) -> Result<()> {
        if self.value(root).shape() != (1, 1) {
            return Err(Error::contract(format!(
                "backward from a non-scalar node of shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut adj: Vec<Option<DenseMatrix>> = vec![None; root.0 + 1];
        adj[root.0] = Some(DenseMatrix::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Param(slot) => {
                    if store.slot(*slot).trainable {
                        store.grad_mut(*slot).add_assign(&g)?;
                    }
                }
                Op::Lookup(rows) => {
                    for (k, &(slot, r)) in rows.iter().enumerate() {
                        if store.slot(slot).trainable {
                            for (o, x) in store.grad_mut(slot).row_mut(r).iter_mut().zip(g.row(k)) {
                                *o += x;
                            }
                        }
                    }
                }
                Op::Const => {}
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *b, map(&g, |x| -x));
                    acc(&mut adj, *a, g);
                }
                Op::Scale(a, c) => acc(&mut adj, *a, map(&g, |x| x * c)),
                Op::Hadamard(a, b) => {
                    let ga = zip_map(&g, self.value(*b), |x, y| x * y);
                    let gb = zip_map(&g, self.value(*a), |x, y| x * y);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(*b))?;
                    let gb = self.value(*a).transpose().matmul(&g)?;
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::MatMulNt(a, b) => {
                    let ga = g.matmul(self.value(*b))?;
                    let gb = g.transpose().matmul(self.value(*a))?;
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Reshape(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(&mut adj, *a, DenseMatrix::from_vec(r, c, g.into_data())?);
                }
                Op::IndexRows(a, idx) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = DenseMatrix::zeros(r, c);
                    for (k, &src) in idx.iter().enumerate() {
                        for (o, x) in ga.row_mut(src).iter_mut().zip(g.row(k)) {
                            *o += x;
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::Gather(a, idx) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = DenseMatrix::zeros(r, c);
                    for (k, &src) in idx.iter().enumerate() {
                        ga.data_mut()[src] += g.data()[k];
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::RowDot(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let mut ga = vb.clone();
                    let mut gb = va.clone();
                    for r in 0..va.rows() {
                        let gr = g.data()[r];
                        ga.row_mut(r).iter_mut().for_each(|x| *x *= gr);
                        gb.row_mut(r).iter_mut().for_each(|x| *x *= gr);
                    }
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::RowScale(a, s) => {
                    let (va, vs) = (self.value(*a), self.value(*s));
                    let mut ga = g.clone();
                    let mut gs = DenseMatrix::zeros(vs.rows(), 1);
                    for r in 0..va.rows() {
                        let c = vs.data()[r];
                        gs.data_mut()[r] = dot(g.row(r), va.row(r));
                        ga.row_mut(r).iter_mut().for_each(|x| *x *= c);
                    }
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *s, gs);
                }
                Op::RowSums(a) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = DenseMatrix::zeros(r, c);
                    for k in 0..r {
                        let gk = g.data()[k];
                        ga.row_mut(k).iter_mut().for_each(|x| *x = gk);
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::ColSums(a) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = DenseMatrix::zeros(r, c);
                    for k in 0..r {
                        ga.row_mut(k).copy_from_slice(g.data());
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::SumAll(a) => {
                    let (r, c) = self.value(*a).shape();
                    let gv = g.data()[0];
                    acc(&mut adj, *a, DenseMatrix::from_vec(r, c, vec![gv; r * c])?);
                }
                Op::AddRowBroadcast(a, b) => {
                    let mut gb = DenseMatrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(&mut adj, *b, gb);
                    acc(&mut adj, *a, g);
                }
                Op::ScalarMul(s, a) => {
                    let c = self.value(*s).data()[0];
                    let gs = DenseMatrix::scalar(dot(g.data(), self.value(*a).data()));
                    acc(&mut adj, *s, gs);
                    acc(&mut adj, *a, map(&g, |x| x * c));
                }
                Op::Relu(a) => {
                    let ga = zip_map(&g, self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 });
                    acc(&mut adj, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = zip_map(&g, &node.value, |x, y| x * y * (1.0 - y));
                    acc(&mut adj, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = DenseMatrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let s = dot(g.row(r), y.row(r));
                        for ((o, gy), yy) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = yy * (gy - s);
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::SoftmaxAll(a) => {
                    let y = &node.value;
                    let s = dot(g.data(), y.data());
                    let ga = zip_map(&g, y, |gy, yy| yy * (gy - s));
                    acc(&mut adj, *a, ga);
                }
                Op::Inner(a, b) => {
                    let gv = g.data()[0];
                    let ga = map(self.value(*b), |x| x * gv);
                    let gb = map(self.value(*a), |x| x * gv);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        acc(&mut adj, p, DenseMatrix::from_vec(rows, cols, slice)?);
                        offset += rows;
                    }
                }
                Op::AddN(parts) => {
                    for &p in parts {
                        acc(&mut adj, p, g.clone());
                    }
                }
                Op::BceWithLogits(z, label) => {
                    let zv = self.value(*z).data()[0];
                    acc(
                        &mut adj,
                        *z,
                        DenseMatrix::scalar(g.data()[0] * (sigmoid(zv) - label)),
                    );
                }
            }
        }
        Ok(())
    }
}

fn acc(adj: &mut [Option<DenseMatrix>], id: NodeId, g: DenseMatrix) {
    match &mut adj[id.0] {
        Some(existing) => existing
            .add_assign(&g)
            .expect("adjoint shape matches its node"),
        slot @ None => *slot = Some(g),
    }
}
