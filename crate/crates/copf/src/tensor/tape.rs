//! Reverse-mode differentiation on an append-only tape.
//!
//! Forward operations are evaluated eagerly and recorded as nodes; the
//! backward pass replays the tape in reverse, accumulating gradients by the
//! chain rule. The operation set is exactly what the training losses need:
//! sparse-dense product, dense products, hadamard, concatenation and
//! slicing, row reductions, softmax / log-sum-exp, sigmoid / softplus /
//! exp / log, row gathers, scalar arithmetic, and stop-gradient.
//!
//! Stop-gradient is a first-class node: during backward, a node whose
//! `stop_grad` flag is set propagates nothing to its inputs regardless of
//! the gradient accumulated on it. Forward values are unaffected.
//!
//! Everything is `f64` and single-threaded; identical inputs replay to
//! bitwise-identical values and gradients.

use std::rc::Rc;

use crate::error::{CopfError, Result};
use crate::tensor::dense::DenseMatrix;
use crate::tensor::params::{ParamId, ParameterStore};
use crate::tensor::sparse::SparseMatrix;

/// Index of a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// A row-normalized propagation operator together with its adjoint, which
/// the backward pass of `spmm` multiplies by.
#[derive(Debug)]
pub struct SpmmOperator {
    pub forward: SparseMatrix,
    pub adjoint: SparseMatrix,
}

impl SpmmOperator {
    pub fn new(forward: SparseMatrix) -> Self {
        let adjoint = forward.transpose();
        SpmmOperator { forward, adjoint }
    }
}

#[derive(Clone, Debug)]
enum Op {
    /// Constant or input leaf.
    Leaf,
    /// Leaf bound to a parameter in a `ParameterStore`.
    Param(ParamId),
    /// Replayed stop-gradient constant (see [`SgMode::Replay`]).
    SgConstant,
    Spmm(Rc<SpmmOperator>),
    MatMul,
    MatMulNT,
    Add,
    Sub,
    Hadamard,
    Scale(f64),
    ConcatRows,
    ConcatCols,
    SliceRows { start: usize, len: usize },
    SliceCols { start: usize, len: usize },
    GatherRows(Rc<Vec<usize>>),
    SumAll,
    MeanAll,
    RowMean,
    MulColBroadcast,
    MulRowBroadcast,
    AddRowBroadcast,
    Reshape,
    SoftmaxRows,
    /// Carries the row softmax computed on the forward pass; backward
    /// reuses it instead of re-exponentiating.
    RowLogSumExp(Rc<DenseMatrix>),
    Diag,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Square,
    StopGradient,
}

#[derive(Debug)]
struct TapeNode {
    op: Op,
    inputs: Vec<NodeId>,
    value: DenseMatrix,
    grad: Option<DenseMatrix>,
    stop_grad: bool,
}

/// How `stop_gradient` behaves, used by the finite-difference machinery.
///
/// A stop-gradient node declares that its output is to be treated as a
/// constant by the gradient. To finite-difference exactly that function,
/// the values emitted by stop-gradient nodes must be frozen at the base
/// point while the rest of the computation sees the perturbed parameters:
/// `Record` captures the values on a base-point pass, `Replay` substitutes
/// them on perturbed passes (in construction order).
#[derive(Debug)]
pub enum SgMode {
    Live,
    Record(Vec<DenseMatrix>),
    Replay { values: Vec<DenseMatrix>, cursor: usize },
}

/// Append-only computation tape.
pub struct Tape {
    nodes: Vec<TapeNode>,
    sg_mode: SgMode,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), sg_mode: SgMode::Live }
    }

    pub fn with_sg_mode(sg_mode: SgMode) -> Self {
        Tape { nodes: Vec::new(), sg_mode }
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

    pub fn grad(&self, id: NodeId) -> Option<&DenseMatrix> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Gradient accumulated on a node, zeros if no path reached it.
    pub fn grad_or_zero(&self, id: NodeId) -> DenseMatrix {
        let node = &self.nodes[id.0];
        node.grad
            .clone()
            .unwrap_or_else(|| DenseMatrix::zeros(node.value.rows(), node.value.cols()))
    }

    /// Values captured by stop-gradient nodes during a `Record` pass.
    pub fn take_recorded_sg(&mut self) -> Vec<DenseMatrix> {
        match std::mem::replace(&mut self.sg_mode, SgMode::Live) {
            SgMode::Record(values) => values,
            other => {
                self.sg_mode = other;
                Vec::new()
            }
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: DenseMatrix, stop: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(TapeNode { op, inputs, value, grad: None, stop_grad: stop });
        id
    }

    // ---- leaves ----

    pub fn constant(&mut self, value: DenseMatrix) -> NodeId {
        self.push(Op::Leaf, vec![], value, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(DenseMatrix::scalar(v))
    }

    /// Bind a parameter as a leaf; `write_grads` later accumulates its
    /// gradient back into the store.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> NodeId {
        self.push(Op::Param(id), vec![], store.value(id).clone(), false)
    }

    // ---- structure ----

    pub fn spmm(&mut self, operator: &Rc<SpmmOperator>, b: NodeId) -> Result<NodeId> {
        let value = operator.forward.spmm(self.value(b))?;
        Ok(self.push(Op::Spmm(Rc::clone(operator)), vec![b], value, false))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul, vec![a, b], value, false))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(Op::MatMulNT, vec![a, b], value, false))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add, vec![a, b], value, false))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub, vec![a, b], value, false))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(Op::Hadamard, vec![a, b], value, false))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).scale(c);
        self.push(Op::Scale(c), vec![a], value, false)
    }

    /// Left-to-right sum of a non-empty node list.
    pub fn sum_nodes(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        let mut acc = *ids.first().ok_or_else(|| {
            CopfError::Usage("sum_nodes: empty node list".into())
        })?;
        for &id in &ids[1..] {
            acc = self.add(acc, id)?;
        }
        Ok(acc)
    }

    pub fn concat_rows(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(CopfError::Usage("concat_rows: empty node list".into()));
        }
        let cols = self.value(ids[0]).cols();
        let mut values = Vec::new();
        let mut rows = 0;
        for &id in ids {
            let m = self.value(id);
            if m.cols() != cols {
                return Err(CopfError::Config(format!(
                    "concat_rows: column mismatch {} vs {}",
                    cols,
                    m.cols()
                )));
            }
            rows += m.rows();
            values.extend_from_slice(m.values());
        }
        let value = DenseMatrix::from_values(rows, cols, values)?;
        Ok(self.push(Op::ConcatRows, ids.to_vec(), value, false))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ma, mb) = (self.value(a), self.value(b));
        if ma.rows() != mb.rows() {
            return Err(CopfError::Config(format!(
                "concat_cols: row mismatch {} vs {}",
                ma.rows(),
                mb.rows()
            )));
        }
        let rows = ma.rows();
        let cols = ma.cols() + mb.cols();
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            values.extend_from_slice(ma.row(r));
            values.extend_from_slice(mb.row(r));
        }
        let value = DenseMatrix::from_values(rows, cols, values)?;
        Ok(self.push(Op::ConcatCols, vec![a, b], value, false))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let m = self.value(a);
        if start + len > m.rows() {
            return Err(CopfError::Config(format!(
                "slice_rows: range {}..{} outside {} rows",
                start,
                start + len,
                m.rows()
            )));
        }
        let cols = m.cols();
        let values = m.values()[start * cols..(start + len) * cols].to_vec();
        let value = DenseMatrix::from_values(len, cols, values)?;
        Ok(self.push(Op::SliceRows { start, len }, vec![a], value, false))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let m = self.value(a);
        if start + len > m.cols() {
            return Err(CopfError::Config(format!(
                "slice_cols: range {}..{} outside {} cols",
                start,
                start + len,
                m.cols()
            )));
        }
        let mut values = Vec::with_capacity(m.rows() * len);
        for r in 0..m.rows() {
            values.extend_from_slice(&m.row(r)[start..start + len]);
        }
        let value = DenseMatrix::from_values(m.rows(), len, values)?;
        Ok(self.push(Op::SliceCols { start, len }, vec![a], value, false))
    }

    /// Select rows by index (with repetition); backward scatter-adds.
    pub fn gather_rows(&mut self, a: NodeId, indices: Rc<Vec<usize>>) -> Result<NodeId> {
        let m = self.value(a);
        let cols = m.cols();
        let mut values = Vec::with_capacity(indices.len() * cols);
        for &i in indices.iter() {
            if i >= m.rows() {
                return Err(CopfError::Config(format!(
                    "gather_rows: index {} outside {} rows",
                    i,
                    m.rows()
                )));
            }
            values.extend_from_slice(m.row(i));
        }
        let value = DenseMatrix::from_values(indices.len(), cols, values)?;
        Ok(self.push(Op::GatherRows(indices), vec![a], value, false))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = DenseMatrix::scalar(self.value(a).sum_all());
        self.push(Op::SumAll, vec![a], value, false)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        let n = m.len() as f64;
        let value = DenseMatrix::scalar(m.sum_all() / n);
        self.push(Op::MeanAll, vec![a], value, false)
    }

    /// Row means, `n x m -> n x 1`, each row summed left to right.
    pub fn row_mean(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        let cols = m.cols() as f64;
        let mut values = Vec::with_capacity(m.rows());
        for r in 0..m.rows() {
            let mut acc = 0.0;
            for &v in m.row(r) {
                acc += v;
            }
            values.push(acc / cols);
        }
        let value = DenseMatrix::from_values(m.rows(), 1, values).expect("row_mean");
        self.push(Op::RowMean, vec![a], value, false)
    }

    // ---- broadcasts ----

    /// `out[i, j] = mat[i, j] * col[i, 0]`.
    pub fn mul_col_broadcast(&mut self, mat: NodeId, col: NodeId) -> Result<NodeId> {
        let (m, c) = (self.value(mat), self.value(col));
        if c.cols() != 1 || c.rows() != m.rows() {
            return Err(CopfError::Config(format!(
                "mul_col_broadcast: column vector {}x{} does not match {} rows",
                c.rows(),
                c.cols(),
                m.rows()
            )));
        }
        let mut out = m.clone();
        for r in 0..m.rows() {
            let s = c.get(r, 0);
            for v in out.row_mut(r) {
                *v *= s;
            }
        }
        Ok(self.push(Op::MulColBroadcast, vec![mat, col], out, false))
    }

    /// `out[i, j] = mat[i, j] * row[0, j]`.
    pub fn mul_row_broadcast(&mut self, mat: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, r) = (self.value(mat), self.value(row));
        if r.rows() != 1 || r.cols() != m.cols() {
            return Err(CopfError::Config(format!(
                "mul_row_broadcast: row vector {}x{} does not match {} cols",
                r.rows(),
                r.cols(),
                m.cols()
            )));
        }
        let mut out = m.clone();
        for i in 0..m.rows() {
            for (v, &s) in out.row_mut(i).iter_mut().zip(r.row(0)) {
                *v *= s;
            }
        }
        Ok(self.push(Op::MulRowBroadcast, vec![mat, row], out, false))
    }

    /// `out[i, j] = mat[i, j] + row[0, j]`.
    pub fn add_row_broadcast(&mut self, mat: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, r) = (self.value(mat), self.value(row));
        if r.rows() != 1 || r.cols() != m.cols() {
            return Err(CopfError::Config(format!(
                "add_row_broadcast: row vector {}x{} does not match {} cols",
                r.rows(),
                r.cols(),
                m.cols()
            )));
        }
        let mut out = m.clone();
        for i in 0..m.rows() {
            for (v, &s) in out.row_mut(i).iter_mut().zip(r.row(0)) {
                *v += s;
            }
        }
        Ok(self.push(Op::AddRowBroadcast, vec![mat, row], out, false))
    }

    /// Same values, new shape (row-major order preserved).
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let m = self.value(a);
        if rows * cols != m.len() {
            return Err(CopfError::Config(format!(
                "reshape: {}x{} incompatible with {} values",
                rows,
                cols,
                m.len()
            )));
        }
        let value = DenseMatrix::from_values(rows, cols, m.values().to_vec())?;
        Ok(self.push(Op::Reshape, vec![a], value, false))
    }

    // ---- nonlinearities ----

    /// Row-wise softmax with max subtraction; gate values go through this,
    /// so the stabilized form is part of the contract.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let value = softmax_rows_value(self.value(a));
        self.push(Op::SoftmaxRows, vec![a], value, false)
    }

    /// Row-wise log-sum-exp with max subtraction, `n x m -> n x 1`.
    pub fn row_log_sum_exp(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        let mut soft = DenseMatrix::zeros(m.rows(), m.cols());
        let mut values = Vec::with_capacity(m.rows());
        for r in 0..m.rows() {
            let row = m.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut acc = 0.0;
            let dst = soft.row_mut(r);
            for (d, &v) in dst.iter_mut().zip(row) {
                let e = (v - max).exp();
                *d = e;
                acc += e;
            }
            for d in dst.iter_mut() {
                *d /= acc;
            }
            values.push(acc.ln() + max);
        }
        let value = DenseMatrix::from_values(m.rows(), 1, values).expect("row_lse");
        self.push(Op::RowLogSumExp(Rc::new(soft)), vec![a], value, false)
    }

    /// Main diagonal of a square matrix as a column vector.
    pub fn diag(&mut self, a: NodeId) -> Result<NodeId> {
        let m = self.value(a);
        if m.rows() != m.cols() {
            return Err(CopfError::Config(format!(
                "diag: matrix {}x{} is not square",
                m.rows(),
                m.cols()
            )));
        }
        let values: Vec<f64> = (0..m.rows()).map(|i| m.get(i, i)).collect();
        let value = DenseMatrix::from_values(m.rows(), 1, values)?;
        Ok(self.push(Op::Diag, vec![a], value, false))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid, vec![a], value, false)
    }

    /// `ln(1 + e^x)` in the overflow-safe form `max(x, 0) + ln(1 + e^-|x|)`.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(softplus);
        self.push(Op::Softplus, vec![a], value, false)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::exp);
        self.push(Op::Exp, vec![a], value, false)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::ln);
        self.push(Op::Log, vec![a], value, false)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v * v);
        self.push(Op::Square, vec![a], value, false)
    }

    /// Identity forward; backward propagates exactly zero through it.
    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).clone();
        match &mut self.sg_mode {
            SgMode::Live => self.push(Op::StopGradient, vec![a], value, true),
            SgMode::Record(store) => {
                store.push(value.clone());
                self.push(Op::StopGradient, vec![a], value, true)
            }
            SgMode::Replay { values, cursor } => {
                let frozen = values
                    .get(*cursor)
                    .unwrap_or_else(|| panic!("sg replay exhausted at node {cursor}"))
                    .clone();
                *cursor += 1;
                self.push(Op::SgConstant, vec![], frozen, true)
            }
        }
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Parameter gradients stay on the
    /// tape until `write_grads` copies them into the store.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            let (r, c) = self.nodes[loss.0].value.shape();
            return Err(CopfError::Usage(format!(
                "backward requires a scalar loss node, got {r}x{c}"
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(DenseMatrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let grad = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            if self.nodes[i].stop_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let inputs = self.nodes[i].inputs.clone();
            self.propagate(i, &op, &inputs, &grad)?;
        }
        Ok(())
    }

    /// Accumulate parameter-leaf gradients into the store.
    pub fn write_grads(&self, store: &mut ParameterStore) {
        for node in &self.nodes {
            if let (Op::Param(pid), Some(grad)) = (&node.op, &node.grad) {
                store.grad_mut(*pid).add_assign(grad);
            }
        }
    }

    fn accumulate(&mut self, target: NodeId, delta: &DenseMatrix) {
        let node = &mut self.nodes[target.0];
        match &mut node.grad {
            Some(g) => g.add_assign(delta),
            None => node.grad = Some(delta.clone()),
        }
    }

    fn propagate(
        &mut self,
        node: usize,
        op: &Op,
        inputs: &[NodeId],
        grad: &DenseMatrix,
    ) -> Result<()> {
        match op {
            Op::Leaf | Op::Param(_) | Op::SgConstant => {}
            Op::StopGradient => unreachable!("stop nodes never propagate"),
            Op::Spmm(operator) => {
                let delta = operator.adjoint.spmm(grad)?;
                self.accumulate(inputs[0], &delta);
            }
            Op::MatMul => {
                let da = grad.matmul_nt(self.nodes[inputs[1].0].value_ref())?;
                let db = self.nodes[inputs[0].0].value_ref().matmul_tn(grad)?;
                self.accumulate(inputs[0], &da);
                self.accumulate(inputs[1], &db);
            }
            Op::MatMulNT => {
                let da = grad.matmul(self.nodes[inputs[1].0].value_ref())?;
                let db = grad.matmul_tn(self.nodes[inputs[0].0].value_ref())?;
                self.accumulate(inputs[0], &da);
                self.accumulate(inputs[1], &db);
            }
            Op::Add => {
                self.accumulate(inputs[0], grad);
                self.accumulate(inputs[1], grad);
            }
            Op::Sub => {
                self.accumulate(inputs[0], grad);
                let neg = grad.scale(-1.0);
                self.accumulate(inputs[1], &neg);
            }
            Op::Hadamard => {
                let da = grad.hadamard(self.nodes[inputs[1].0].value_ref())?;
                let db = grad.hadamard(self.nodes[inputs[0].0].value_ref())?;
                self.accumulate(inputs[0], &da);
                self.accumulate(inputs[1], &db);
            }
            Op::Scale(c) => {
                let delta = grad.scale(*c);
                self.accumulate(inputs[0], &delta);
            }
            Op::ConcatRows => {
                let mut start = 0;
                for &input in inputs {
                    let rows = self.nodes[input.0].value.rows();
                    let cols = grad.cols();
                    let block = DenseMatrix::from_values(
                        rows,
                        cols,
                        grad.values()[start * cols..(start + rows) * cols].to_vec(),
                    )?;
                    self.accumulate(input, &block);
                    start += rows;
                }
            }
            Op::ConcatCols => {
                let left_cols = self.nodes[inputs[0].0].value.cols();
                let right_cols = self.nodes[inputs[1].0].value.cols();
                let rows = grad.rows();
                let mut left = DenseMatrix::zeros(rows, left_cols);
                let mut right = DenseMatrix::zeros(rows, right_cols);
                for r in 0..rows {
                    left.row_mut(r).copy_from_slice(&grad.row(r)[..left_cols]);
                    right.row_mut(r).copy_from_slice(&grad.row(r)[left_cols..]);
                }
                self.accumulate(inputs[0], &left);
                self.accumulate(inputs[1], &right);
            }
            Op::SliceRows { start, len } => {
                let src = &self.nodes[inputs[0].0].value;
                let mut delta = DenseMatrix::zeros(src.rows(), src.cols());
                for r in 0..*len {
                    delta.row_mut(start + r).copy_from_slice(grad.row(r));
                }
                self.accumulate(inputs[0], &delta);
            }
            Op::SliceCols { start, len } => {
                let src = &self.nodes[inputs[0].0].value;
                let mut delta = DenseMatrix::zeros(src.rows(), src.cols());
                for r in 0..src.rows() {
                    delta.row_mut(r)[*start..start + len].copy_from_slice(grad.row(r));
                }
                self.accumulate(inputs[0], &delta);
            }
            Op::GatherRows(indices) => {
                let src = &self.nodes[inputs[0].0].value;
                let mut delta = DenseMatrix::zeros(src.rows(), src.cols());
                for (r, &i) in indices.iter().enumerate() {
                    let g_row = grad.row(r);
                    for (d, &g) in delta.row_mut(i).iter_mut().zip(g_row) {
                        *d += g;
                    }
                }
                self.accumulate(inputs[0], &delta);
            }
            Op::SumAll => {
                let g = grad.scalar_value();
                let src = &self.nodes[inputs[0].0].value;
                let delta = DenseMatrix::zeros(src.rows(), src.cols()).map(|_| g);
                self.accumulate(inputs[0], &delta);
            }
            Op::MeanAll => {
                let src = &self.nodes[inputs[0].0].value;
                let g = grad.scalar_value() / src.len() as f64;
                let delta = DenseMatrix::zeros(src.rows(), src.cols()).map(|_| g);
                self.accumulate(inputs[0], &delta);
            }
            Op::RowMean => {
                let src = &self.nodes[inputs[0].0].value;
                let cols = src.cols() as f64;
                let mut delta = DenseMatrix::zeros(src.rows(), src.cols());
                for r in 0..src.rows() {
                    let g = grad.get(r, 0) / cols;
                    delta.row_mut(r).iter_mut().for_each(|v| *v = g);
                }
                self.accumulate(inputs[0], &delta);
            }
            Op::MulColBroadcast => {
                let mat = self.nodes[inputs[0].0].value_ref();
                let col = self.nodes[inputs[1].0].value_ref();
                let mut d_mat = grad.clone();
                let mut d_col = DenseMatrix::zeros(col.rows(), 1);
                for r in 0..mat.rows() {
                    let s = col.get(r, 0);
                    let mut acc = 0.0;
                    for (g, m) in grad.row(r).iter().zip(mat.row(r)) {
                        acc += g * m;
                    }
                    d_col.set(r, 0, acc);
                    d_mat.row_mut(r).iter_mut().for_each(|v| *v *= s);
                }
                self.accumulate(inputs[0], &d_mat);
                self.accumulate(inputs[1], &d_col);
            }
            Op::MulRowBroadcast => {
                let mat = self.nodes[inputs[0].0].value_ref();
                let row = self.nodes[inputs[1].0].value_ref();
                let mut d_mat = grad.clone();
                let mut d_row = DenseMatrix::zeros(1, row.cols());
                for r in 0..mat.rows() {
                    for c in 0..mat.cols() {
                        let g = grad.get(r, c);
                        d_row.values_mut()[c] += g * mat.get(r, c);
                        d_mat.set(r, c, g * row.get(0, c));
                    }
                }
                self.accumulate(inputs[0], &d_mat);
                self.accumulate(inputs[1], &d_row);
            }
            Op::AddRowBroadcast => {
                let row = self.nodes[inputs[1].0].value_ref();
                let mut d_row = DenseMatrix::zeros(1, row.cols());
                for r in 0..grad.rows() {
                    for (d, &g) in d_row.values_mut().iter_mut().zip(grad.row(r)) {
                        *d += g;
                    }
                }
                self.accumulate(inputs[0], grad);
                self.accumulate(inputs[1], &d_row);
            }
            Op::Reshape => {
                let src = &self.nodes[inputs[0].0].value;
                let delta = DenseMatrix::from_values(
                    src.rows(),
                    src.cols(),
                    grad.values().to_vec(),
                )?;
                self.accumulate(inputs[0], &delta);
            }
            Op::SoftmaxRows => {
                let y = &self.nodes[node].value;
                let mut delta = DenseMatrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let mut dot = 0.0;
                    for (g, v) in grad.row(r).iter().zip(y.row(r)) {
                        dot += g * v;
                    }
                    for c in 0..y.cols() {
                        delta.set(r, c, y.get(r, c) * (grad.get(r, c) - dot));
                    }
                }
                self.accumulate(inputs[0], &delta);
            }
            Op::RowLogSumExp(soft) => {
                let mut delta = DenseMatrix::zeros(soft.rows(), soft.cols());
                for r in 0..soft.rows() {
                    let g = grad.get(r, 0);
                    for (d, &s) in delta.row_mut(r).iter_mut().zip(soft.row(r)) {
                        *d = g * s;
                    }
                }
                self.accumulate(inputs[0], &delta);
            }
            Op::Diag => {
                let src = &self.nodes[inputs[0].0].value;
                let mut delta = DenseMatrix::zeros(src.rows(), src.cols());
                for i in 0..src.rows() {
                    delta.set(i, i, grad.get(i, 0));
                }
                self.accumulate(inputs[0], &delta);
            }
            Op::Sigmoid => {
                let y = &self.nodes[node].value;
                let delta = grad.hadamard(&y.map(|v| v * (1.0 - v)))?;
                self.accumulate(inputs[0], &delta);
            }
            Op::Softplus => {
                let x = self.nodes[inputs[0].0].value_ref();
                let delta = grad.hadamard(&x.map(sigmoid))?;
                self.accumulate(inputs[0], &delta);
            }
            Op::Exp => {
                let y = &self.nodes[node].value;
                let delta = grad.hadamard(y)?;
                self.accumulate(inputs[0], &delta);
            }
            Op::Log => {
                let x = self.nodes[inputs[0].0].value_ref();
                let delta = grad.hadamard(&x.map(|v| 1.0 / v))?;
                self.accumulate(inputs[0], &delta);
            }
            Op::Square => {
                let x = self.nodes[inputs[0].0].value_ref();
                let delta = grad.hadamard(&x.scale(2.0))?;
                self.accumulate(inputs[0], &delta);
            }
        }
        Ok(())
    }
}

impl TapeNode {
    fn value_ref(&self) -> &DenseMatrix {
        &self.value
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softmax_rows_value(m: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let row = m.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut acc = 0.0;
        let dst = out.row_mut(r);
        for (d, &v) in dst.iter_mut().zip(row) {
            let e = (v - max).exp();
            *d = e;
            acc += e;
        }
        for d in dst.iter_mut() {
            *d /= acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::params::ParameterStore;

    fn store_with(name: &str, values: Vec<f64>, rows: usize, cols: usize) -> ParameterStore {
        let mut store = ParameterStore::new();
        store
            .add(name, DenseMatrix::from_values(rows, cols, values).unwrap())
            .unwrap();
        store
    }

    #[test]
    fn quadratic_gradient() {
        // f(x) = sum(x .* x), x = [1, 2] -> grad [2, 4]
        let store = store_with("x", vec![1.0, 2.0], 1, 2);
        let mut tape = Tape::new();
        let x = tape.param(&store, store.id("x").unwrap());
        let sq = tape.hadamard(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().values(), &[2.0, 4.0]);
    }

    #[test]
    fn stop_gradient_blocks_one_factor() {
        // f(x) = sum(sg(x) .* x), x = [1, 2] -> grad [1, 2]
        let store = store_with("x", vec![1.0, 2.0], 1, 2);
        let mut tape = Tape::new();
        let x = tape.param(&store, store.id("x").unwrap());
        let frozen = tape.stop_gradient(x);
        let prod = tape.hadamard(frozen, x).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().values(), &[1.0, 2.0]);
    }

    #[test]
    fn stop_gradient_path_is_exactly_zero() {
        let store = store_with("x", vec![0.5, -1.5], 1, 2);
        let mut tape = Tape::new();
        let x = tape.param(&store, store.id("x").unwrap());
        let frozen = tape.stop_gradient(x);
        let loss = tape.sum_all(frozen);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none(), "no gradient may reach through sg");
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.constant(DenseMatrix::zeros(2, 2));
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, CopfError::Usage(_)));
    }

    #[test]
    fn softmax_rows_shift_invariant() {
        let mut tape = Tape::new();
        let a = tape.constant(DenseMatrix::from_rows(&[vec![2.0_f64.ln(), 0.0, 0.0]]).unwrap());
        let s = tape.softmax_rows(a);
        let v = tape.value(s).values().to_vec();
        assert!((v[0] - 0.5).abs() < 1e-12);
        assert!((v[1] - 0.25).abs() < 1e-12);
        assert!((v[2] - 0.25).abs() < 1e-12);

        let mut tape2 = Tape::new();
        let shifted = tape2.constant(
            DenseMatrix::from_rows(&[vec![2.0_f64.ln() + 7.0, 7.0, 7.0]]).unwrap(),
        );
        let s2 = tape2.softmax_rows(shifted);
        for (a, b) in tape2.value(s2).values().iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gather_scatter_accumulates_duplicates() {
        let store = store_with("m", vec![1.0, 2.0, 3.0, 4.0], 2, 2);
        let mut tape = Tape::new();
        let m = tape.param(&store, store.id("m").unwrap());
        let g = tape.gather_rows(m, Rc::new(vec![0, 0, 1])).unwrap();
        let loss = tape.sum_all(g);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(m).unwrap().values(), &[2.0, 2.0, 1.0, 1.0]);
    }
}
