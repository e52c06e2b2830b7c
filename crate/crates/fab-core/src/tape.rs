//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! Values are computed eagerly as nodes are pushed. A backward pass emits its
//! adjoint computations as ordinary tape nodes, so gradients are themselves
//! differentiable: the decoder-Jacobian loss differentiates through a backward
//! pass without any special casing.

use crate::tensor::{inverse_spd, logdet_spd, Matrix, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

const NO_INPUT: usize = usize::MAX;

#[derive(Debug, Clone, Copy)]
pub enum Op {
    Leaf,
    MatMul,
    MatMulNT,
    MatMulTN,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    AddRowBroadcast,
    Relu,
    Sigmoid,
    Tanh,
    Log,
    Recip,
    Sqrt,
    Clamp(f64, f64),
    SoftmaxRows,
    RowSums,
    RepeatCol(usize),
    ColSums,
    RepeatRow(usize),
    SumAll,
    BroadcastScalar(usize, usize),
    ConcatCols,
    SliceCols(usize, usize),
    PadCols(usize, usize),
    Reshape(usize, usize),
    BatchMatMulSq(usize),
    BatchTransposeSq(usize),
    BatchInvSpd(usize),
    BatchLogDetSpd(usize),
    /// value = a ⊙ [src > 0]; the relu vjp, closed under differentiation.
    ReluMaskMul,
    /// value = a ⊙ [lo < src < hi]; the clamp vjp.
    ClampMaskMul(f64, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::MatMulNT => "matmul_nt",
            Op::MatMulTN => "matmul_tn",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::AddRowBroadcast => "add_row_broadcast",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Log => "log",
            Op::Recip => "recip",
            Op::Sqrt => "sqrt",
            Op::Clamp(_, _) => "clamp",
            Op::SoftmaxRows => "softmax_rows",
            Op::RowSums => "row_sums",
            Op::RepeatCol(_) => "repeat_col",
            Op::ColSums => "col_sums",
            Op::RepeatRow(_) => "repeat_row",
            Op::SumAll => "sum_all",
            Op::BroadcastScalar(_, _) => "broadcast_scalar",
            Op::ConcatCols => "concat_cols",
            Op::SliceCols(_, _) => "slice_cols",
            Op::PadCols(_, _) => "pad_cols",
            Op::Reshape(_, _) => "reshape",
            Op::BatchMatMulSq(_) => "batch_matmul_sq",
            Op::BatchTransposeSq(_) => "batch_transpose_sq",
            Op::BatchInvSpd(_) => "batch_inv_spd",
            Op::BatchLogDetSpd(_) => "batch_logdet_spd",
            Op::ReluMaskMul => "relu_mask_mul",
            Op::ClampMaskMul(_, _) => "clamp_mask_mul",
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: Op,
    a: usize,
    b: usize,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<Matrix>,
    first_nonfinite: Option<(usize, &'static str)>,
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.values[id.0]
    }

    /// Err with the offending node id if any op produced a non-finite value.
    pub fn ensure_finite(&self) -> Result<(), TensorError> {
        match self.first_nonfinite {
            None => Ok(()),
            Some((node, op)) => Err(TensorError::NonFinite {
                node,
                op: op.to_string(),
            }),
        }
    }

    fn push(&mut self, op: Op, a: usize, b: usize, value: Matrix) -> NodeId {
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some((self.nodes.len(), op.name()));
        }
        self.nodes.push(Node { op, a, b });
        self.values.push(value);
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, NO_INPUT, NO_INPUT, value)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.leaf(value)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Matrix::scalar(v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.values[a.0].matmul(&self.values[b.0]);
        self.push(Op::MatMul, a.0, b.0, v)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.values[a.0].matmul_nt(&self.values[b.0]);
        self.push(Op::MatMulNT, a.0, b.0, v)
    }

    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.values[a.0].matmul_tn(&self.values[b.0]);
        self.push(Op::MatMulTN, a.0, b.0, v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.values[a.0].zip(&self.values[b.0], |x, y| x + y);
        self.push(Op::Add, a.0, b.0, v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.values[a.0].zip(&self.values[b.0], |x, y| x - y);
        self.push(Op::Sub, a.0, b.0, v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.values[a.0].zip(&self.values[b.0], |x, y| x * y);
        self.push(Op::Mul, a.0, b.0, v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.values[a.0].map(|x| x * c);
        self.push(Op::Scale(c), a.0, NO_INPUT, v)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.values[a.0].map(|x| x + c);
        self.push(Op::AddScalar(c), a.0, NO_INPUT, v)
    }

    /// a: M×n, bias: 1×n, broadcast-added to every row.
    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (m, n) = self.values[a.0].shape();
        assert_eq!(self.values[bias.0].shape(), (1, n), "bias must be 1 x cols");
        let mut v = self.values[a.0].clone();
        for i in 0..m {
            for j in 0..n {
                let b = self.values[bias.0].get(0, j);
                v.set(i, j, v.get(i, j) + b);
            }
        }
        self.push(Op::AddRowBroadcast, a.0, bias.0, v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu, a.0, NO_INPUT, v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.push(Op::Sigmoid, a.0, NO_INPUT, v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].map(f64::tanh);
        self.push(Op::Tanh, a.0, NO_INPUT, v)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].map(f64::ln);
        self.push(Op::Log, a.0, NO_INPUT, v)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].map(|x| 1.0 / x);
        self.push(Op::Recip, a.0, NO_INPUT, v)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].map(f64::sqrt);
        self.push(Op::Sqrt, a.0, NO_INPUT, v)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.values[a.0].map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(lo, hi), a.0, NO_INPUT, v)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let src = &self.values[a.0];
        let (m, n) = src.shape();
        let mut v = Matrix::zeros(m, n);
        for i in 0..m {
            let row = src.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..n {
                denom += (row[j] - mx).exp();
            }
            for j in 0..n {
                v.set(i, j, (row[j] - mx).exp() / denom);
            }
        }
        self.push(Op::SoftmaxRows, a.0, NO_INPUT, v)
    }

    /// M×n -> M×1, summing each row.
    pub fn row_sums(&mut self, a: NodeId) -> NodeId {
        let src = &self.values[a.0];
        let (m, n) = src.shape();
        let mut v = Matrix::zeros(m, 1);
        for i in 0..m {
            let mut s = 0.0;
            for j in 0..n {
                s += src.get(i, j);
            }
            v.set(i, 0, s);
        }
        self.push(Op::RowSums, a.0, NO_INPUT, v)
    }

    /// M×1 -> M×n, tiling the single column.
    pub fn repeat_col(&mut self, a: NodeId, n: usize) -> NodeId {
        let src = &self.values[a.0];
        let (m, c) = src.shape();
        assert_eq!(c, 1, "repeat_col expects a column vector");
        let mut v = Matrix::zeros(m, n);
        for i in 0..m {
            let x = src.get(i, 0);
            for j in 0..n {
                v.set(i, j, x);
            }
        }
        self.push(Op::RepeatCol(n), a.0, NO_INPUT, v)
    }

    /// M×n -> 1×n, summing each column.
    pub fn col_sums(&mut self, a: NodeId) -> NodeId {
        let src = &self.values[a.0];
        let (m, n) = src.shape();
        let mut v = Matrix::zeros(1, n);
        for i in 0..m {
            for j in 0..n {
                v.set(0, j, v.get(0, j) + src.get(i, j));
            }
        }
        self.push(Op::ColSums, a.0, NO_INPUT, v)
    }

    /// 1×n -> M×n, tiling the single row.
    pub fn repeat_row(&mut self, a: NodeId, m: usize) -> NodeId {
        let src = &self.values[a.0];
        let (r, n) = src.shape();
        assert_eq!(r, 1, "repeat_row expects a row vector");
        let mut v = Matrix::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                v.set(i, j, src.get(0, j));
            }
        }
        self.push(Op::RepeatRow(m), a.0, NO_INPUT, v)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.values[a.0].data().iter().sum();
        self.push(Op::SumAll, a.0, NO_INPUT, Matrix::scalar(s))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.values[a.0].len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// 1×1 -> rows×cols constant broadcast.
    pub fn broadcast_scalar(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let x = self.values[a.0].scalar_value();
        self.push(
            Op::BroadcastScalar(rows, cols),
            a.0,
            NO_INPUT,
            Matrix::fill(rows, cols, x),
        )
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, p) = self.values[a.0].shape();
        let (m2, q) = self.values[b.0].shape();
        assert_eq!(m, m2, "concat_cols row counts must agree");
        let mut v = Matrix::zeros(m, p + q);
        for i in 0..m {
            for j in 0..p {
                v.set(i, j, self.values[a.0].get(i, j));
            }
            for j in 0..q {
                v.set(i, p + j, self.values[b.0].get(i, j));
            }
        }
        self.push(Op::ConcatCols, a.0, b.0, v)
    }

    pub fn slice_cols(&mut self, a: NodeId, from: usize, to: usize) -> NodeId {
        let (m, n) = self.values[a.0].shape();
        assert!(from < to && to <= n, "slice_cols out of range");
        let mut v = Matrix::zeros(m, to - from);
        for i in 0..m {
            for j in from..to {
                v.set(i, j - from, self.values[a.0].get(i, j));
            }
        }
        self.push(Op::SliceCols(from, to), a.0, NO_INPUT, v)
    }

    pub fn pad_cols(&mut self, a: NodeId, left: usize, right: usize) -> NodeId {
        let (m, n) = self.values[a.0].shape();
        let mut v = Matrix::zeros(m, left + n + right);
        for i in 0..m {
            for j in 0..n {
                v.set(i, left + j, self.values[a.0].get(i, j));
            }
        }
        self.push(Op::PadCols(left, right), a.0, NO_INPUT, v)
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let v = self.values[a.0].reshaped(rows, cols);
        self.push(Op::Reshape(rows, cols), a.0, NO_INPUT, v)
    }

    /// Row-wise product of n×n matrices stored flattened as M×n² rows.
    pub fn batch_matmul_sq(&mut self, a: NodeId, b: NodeId, n: usize) -> NodeId {
        let (m, w) = self.values[a.0].shape();
        assert_eq!(w, n * n);
        assert_eq!(self.values[b.0].shape(), (m, n * n));
        let mut v = Matrix::zeros(m, n * n);
        for r in 0..m {
            let ra = self.values[a.0].row(r);
            let rb = self.values[b.0].row(r);
            let out = &mut v.data_mut()[r * n * n..(r + 1) * n * n];
            for i in 0..n {
                for k in 0..n {
                    let aik = ra[i * n + k];
                    if aik == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        out[i * n + j] += aik * rb[k * n + j];
                    }
                }
            }
        }
        self.push(Op::BatchMatMulSq(n), a.0, b.0, v)
    }

    pub fn batch_transpose_sq(&mut self, a: NodeId, n: usize) -> NodeId {
        let (m, w) = self.values[a.0].shape();
        assert_eq!(w, n * n);
        let mut v = Matrix::zeros(m, n * n);
        for r in 0..m {
            let src = self.values[a.0].row(r);
            let out = &mut v.data_mut()[r * n * n..(r + 1) * n * n];
            for i in 0..n {
                for j in 0..n {
                    out[j * n + i] = src[i * n + j];
                }
            }
        }
        self.push(Op::BatchTransposeSq(n), a.0, NO_INPUT, v)
    }

    /// Row-wise inverse of SPD n×n matrices stored flattened as M×n² rows.
    pub fn batch_inv_spd(&mut self, a: NodeId, n: usize) -> NodeId {
        let (m, w) = self.values[a.0].shape();
        assert_eq!(w, n * n);
        let mut v = Matrix::zeros(m, n * n);
        let mut bad = false;
        for r in 0..m {
            match inverse_spd(self.values[a.0].row(r), n) {
                Ok(inv) => v.data_mut()[r * n * n..(r + 1) * n * n].copy_from_slice(&inv),
                Err(_) => {
                    bad = true;
                    for x in &mut v.data_mut()[r * n * n..(r + 1) * n * n] {
                        *x = f64::NAN;
                    }
                }
            }
        }
        let id = self.push(Op::BatchInvSpd(n), a.0, NO_INPUT, v);
        if bad && self.first_nonfinite.is_none() {
            self.first_nonfinite = Some((id.0, "batch_inv_spd"));
        }
        id
    }

    /// Row-wise log-determinant of SPD n×n matrices: M×n² -> M×1.
    pub fn batch_logdet_spd(&mut self, a: NodeId, n: usize) -> NodeId {
        let (m, w) = self.values[a.0].shape();
        assert_eq!(w, n * n);
        let mut v = Matrix::zeros(m, 1);
        let mut bad = false;
        for r in 0..m {
            match logdet_spd(self.values[a.0].row(r), n) {
                Ok(ld) => v.set(r, 0, ld),
                Err(_) => {
                    bad = true;
                    v.set(r, 0, f64::NAN);
                }
            }
        }
        let id = self.push(Op::BatchLogDetSpd(n), a.0, NO_INPUT, v);
        if bad && self.first_nonfinite.is_none() {
            self.first_nonfinite = Some((id.0, "batch_logdet_spd"));
        }
        id
    }

    pub fn relu_mask_mul(&mut self, a: NodeId, src: NodeId) -> NodeId {
        let v = self.values[a.0].zip(&self.values[src.0], |g, s| if s > 0.0 { g } else { 0.0 });
        self.push(Op::ReluMaskMul, a.0, src.0, v)
    }

    pub fn clamp_mask_mul(&mut self, a: NodeId, src: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.values[a.0].zip(&self.values[src.0], |g, s| {
            if s > lo && s < hi {
                g
            } else {
                0.0
            }
        });
        self.push(Op::ClampMaskMul(lo, hi), a.0, src.0, v)
    }

    /// Row-wise Euclidean norms: M×k -> M×1. A vanishing additive shift keeps
    /// the derivative finite at the origin without perturbing normal values.
    pub fn row_norms(&mut self, a: NodeId) -> NodeId {
        let sq = self.mul(a, a);
        let ss = self.row_sums(sq);
        let shifted = self.add_scalar(ss, 1e-300);
        self.sqrt(shifted)
    }

    /// Backward pass from a scalar output; returns adjoint node ids per target.
    pub fn backward(
        &mut self,
        output: NodeId,
        targets: &[NodeId],
    ) -> Result<Vec<Option<NodeId>>, TensorError> {
        assert_eq!(
            self.values[output.0].shape(),
            (1, 1),
            "backward without a seed requires a scalar output"
        );
        self.backward_seeded(output, Matrix::scalar(1.0), targets)
    }

    /// Backward pass with an explicit output adjoint (vector-Jacobian product).
    /// Adjoint computations are appended to the tape as ordinary nodes.
    pub fn backward_seeded(
        &mut self,
        output: NodeId,
        seed: Matrix,
        targets: &[NodeId],
    ) -> Result<Vec<Option<NodeId>>, TensorError> {
        if self.nodes.is_empty() {
            return Err(TensorError::BackwardBeforeForward);
        }
        assert_eq!(
            seed.shape(),
            self.values[output.0].shape(),
            "seed shape must match output shape"
        );
        let n = self.nodes.len();

        // desc[i]: node i transitively depends on some target.
        let mut desc = vec![false; n];
        for t in targets {
            desc[t.0] = true;
        }
        for i in 0..n {
            if desc[i] {
                continue;
            }
            let node = self.nodes[i];
            if (node.a != NO_INPUT && desc[node.a]) || (node.b != NO_INPUT && desc[node.b]) {
                desc[i] = true;
            }
        }

        let mut adj: Vec<Option<NodeId>> = vec![None; n];
        let seed_id = self.constant(seed);
        adj[output.0] = Some(seed_id);

        for i in (0..n).rev() {
            let Some(g) = adj[i] else { continue };
            if !desc[i] {
                continue;
            }
            self.emit_backward(i, g, &mut adj, &desc);
        }

        Ok(targets.iter().map(|t| adj[t.0]).collect())
    }

    fn accum(&mut self, adj: &mut [Option<NodeId>], idx: usize, contrib: NodeId) {
        adj[idx] = Some(match adj[idx] {
            None => contrib,
            Some(prev) => self.add(prev, contrib),
        });
    }

    fn emit_backward(&mut self, i: usize, g: NodeId, adj: &mut [Option<NodeId>], desc: &[bool]) {
        let node = self.nodes[i];
        let a = node.a;
        let b = node.b;
        let want_a = a != NO_INPUT && desc[a];
        let want_b = b != NO_INPUT && desc[b];
        if !want_a && !want_b {
            return;
        }
        match node.op {
            Op::Leaf => {}
            Op::MatMul => {
                if want_a {
                    let c = self.matmul_nt(g, NodeId(b));
                    self.accum(adj, a, c);
                }
                if want_b {
                    let c = self.matmul_tn(NodeId(a), g);
                    self.accum(adj, b, c);
                }
            }
            Op::MatMulNT => {
                if want_a {
                    let c = self.matmul(g, NodeId(b));
                    self.accum(adj, a, c);
                }
                if want_b {
                    let c = self.matmul_tn(g, NodeId(a));
                    self.accum(adj, b, c);
                }
            }
            Op::MatMulTN => {
                if want_a {
                    let c = self.matmul_nt(NodeId(b), g);
                    self.accum(adj, a, c);
                }
                if want_b {
                    let c = self.matmul(NodeId(a), g);
                    self.accum(adj, b, c);
                }
            }
            Op::Add => {
                if want_a {
                    self.accum(adj, a, g);
                }
                if want_b {
                    self.accum(adj, b, g);
                }
            }
            Op::Sub => {
                if want_a {
                    self.accum(adj, a, g);
                }
                if want_b {
                    let c = self.scale(g, -1.0);
                    self.accum(adj, b, c);
                }
            }
            Op::Mul => {
                if want_a {
                    let c = self.mul(g, NodeId(b));
                    self.accum(adj, a, c);
                }
                if want_b {
                    let c = self.mul(g, NodeId(a));
                    self.accum(adj, b, c);
                }
            }
            Op::Scale(c0) => {
                if want_a {
                    let c = self.scale(g, c0);
                    self.accum(adj, a, c);
                }
            }
            Op::AddScalar(_) => {
                if want_a {
                    self.accum(adj, a, g);
                }
            }
            Op::AddRowBroadcast => {
                if want_a {
                    self.accum(adj, a, g);
                }
                if want_b {
                    let c = self.col_sums(g);
                    self.accum(adj, b, c);
                }
            }
            Op::Relu => {
                if want_a {
                    let c = self.relu_mask_mul(g, NodeId(a));
                    self.accum(adj, a, c);
                }
            }
            Op::Sigmoid => {
                if want_a {
                    let y = NodeId(i);
                    let neg = self.scale(y, -1.0);
                    let one_minus = self.add_scalar(neg, 1.0);
                    let dydx = self.mul(y, one_minus);
                    let c = self.mul(g, dydx);
                    self.accum(adj, a, c);
                }
            }
            Op::Tanh => {
                if want_a {
                    let y = NodeId(i);
                    let y2 = self.mul(y, y);
                    let neg = self.scale(y2, -1.0);
                    let dydx = self.add_scalar(neg, 1.0);
                    let c = self.mul(g, dydx);
                    self.accum(adj, a, c);
                }
            }
            Op::Log => {
                if want_a {
                    let r = self.recip(NodeId(a));
                    let c = self.mul(g, r);
                    self.accum(adj, a, c);
                }
            }
            Op::Recip => {
                if want_a {
                    let y = NodeId(i);
                    let y2 = self.mul(y, y);
                    let gy = self.mul(g, y2);
                    let c = self.scale(gy, -1.0);
                    self.accum(adj, a, c);
                }
            }
            Op::Sqrt => {
                if want_a {
                    let y = NodeId(i);
                    let ry = self.recip(y);
                    let half = self.scale(ry, 0.5);
                    let c = self.mul(g, half);
                    self.accum(adj, a, c);
                }
            }
            Op::Clamp(lo, hi) => {
                if want_a {
                    let c = self.clamp_mask_mul(g, NodeId(a), lo, hi);
                    self.accum(adj, a, c);
                }
            }
            Op::SoftmaxRows => {
                if want_a {
                    let y = NodeId(i);
                    let gy = self.mul(g, y);
                    let s = self.row_sums(gy);
                    let n_cols = self.values[i].cols();
                    let srep = self.repeat_col(s, n_cols);
                    let centered = self.sub(g, srep);
                    let c = self.mul(y, centered);
                    self.accum(adj, a, c);
                }
            }
            Op::RowSums => {
                if want_a {
                    let n_cols = self.values[a].cols();
                    let c = self.repeat_col(g, n_cols);
                    self.accum(adj, a, c);
                }
            }
            Op::RepeatCol(_) => {
                if want_a {
                    let c = self.row_sums(g);
                    self.accum(adj, a, c);
                }
            }
            Op::ColSums => {
                if want_a {
                    let m = self.values[a].rows();
                    let c = self.repeat_row(g, m);
                    self.accum(adj, a, c);
                }
            }
            Op::RepeatRow(_) => {
                if want_a {
                    let c = self.col_sums(g);
                    self.accum(adj, a, c);
                }
            }
            Op::SumAll => {
                if want_a {
                    let (r, c0) = self.values[a].shape();
                    let c = self.broadcast_scalar(g, r, c0);
                    self.accum(adj, a, c);
                }
            }
            Op::BroadcastScalar(_, _) => {
                if want_a {
                    let c = self.sum_all(g);
                    self.accum(adj, a, c);
                }
            }
            Op::ConcatCols => {
                let p = self.values[a].cols();
                let q = self.values[b].cols();
                if want_a {
                    let c = self.slice_cols(g, 0, p);
                    self.accum(adj, a, c);
                }
                if want_b {
                    let c = self.slice_cols(g, p, p + q);
                    self.accum(adj, b, c);
                }
            }
            Op::SliceCols(from, to) => {
                if want_a {
                    let n_cols = self.values[a].cols();
                    let c = self.pad_cols(g, from, n_cols - to);
                    self.accum(adj, a, c);
                }
            }
            Op::PadCols(left, _) => {
                if want_a {
                    let n_cols = self.values[a].cols();
                    let c = self.slice_cols(g, left, left + n_cols);
                    self.accum(adj, a, c);
                }
            }
            Op::Reshape(_, _) => {
                if want_a {
                    let (r, c0) = self.values[a].shape();
                    let c = self.reshape(g, r, c0);
                    self.accum(adj, a, c);
                }
            }
            Op::BatchMatMulSq(n) => {
                if want_a {
                    let bt = self.batch_transpose_sq(NodeId(b), n);
                    let c = self.batch_matmul_sq(g, bt, n);
                    self.accum(adj, a, c);
                }
                if want_b {
                    let at = self.batch_transpose_sq(NodeId(a), n);
                    let c = self.batch_matmul_sq(at, g, n);
                    self.accum(adj, b, c);
                }
            }
            Op::BatchTransposeSq(n) => {
                if want_a {
                    let c = self.batch_transpose_sq(g, n);
                    self.accum(adj, a, c);
                }
            }
            Op::BatchInvSpd(n) => {
                if want_a {
                    // dA = -Y^T dY Y^T with Y = A^{-1}.
                    let y = NodeId(i);
                    let yt = self.batch_transpose_sq(y, n);
                    let t = self.batch_matmul_sq(yt, g, n);
                    let t2 = self.batch_matmul_sq(t, yt, n);
                    let c = self.scale(t2, -1.0);
                    self.accum(adj, a, c);
                }
            }
            Op::BatchLogDetSpd(n) => {
                if want_a {
                    // d logdet(A) = A^{-1} scaled by the incoming scalar per row.
                    let inv = self.batch_inv_spd(NodeId(a), n);
                    let grep = self.repeat_col(g, n * n);
                    let c = self.mul(grep, inv);
                    self.accum(adj, a, c);
                }
            }
            Op::ReluMaskMul => {
                // Linear in the first argument; mask source gets zero a.e.
                if want_a {
                    let c = self.relu_mask_mul(g, NodeId(b));
                    self.accum(adj, a, c);
                }
            }
            Op::ClampMaskMul(lo, hi) => {
                if want_a {
                    let c = self.clamp_mask_mul(g, NodeId(b), lo, hi);
                    self.accum(adj, a, c);
                }
            }
        }
    }
}

/// Jacobian of a vector function at a point: row i is the gradient of output
/// component i, computed by one backward pass per output row.
pub fn jacobian(
    f: impl Fn(&mut Tape, NodeId) -> NodeId,
    z: &[f64],
) -> Result<Matrix, TensorError> {
    let mut tape = Tape::new();
    let zid = tape.leaf(Matrix::row_vector(z));
    let out = f(&mut tape, zid);
    let (r, out_dim) = tape.value(out).shape();
    assert_eq!(r, 1, "jacobian expects a single-row output");
    let mut jac = Matrix::zeros(out_dim, z.len());
    for i in 0..out_dim {
        let mut seed = Matrix::zeros(1, out_dim);
        seed.set(0, i, 1.0);
        let grads = tape.backward_seeded(out, seed, &[zid])?;
        if let Some(gid) = grads[0] {
            let gv = tape.value(gid);
            for j in 0..z.len() {
                jac.set(i, j, gv.get(0, j));
            }
        }
    }
    tape.ensure_finite()?;
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_forward_matches_definition() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::row_vector(&[-1.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn identity_linear_layer_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::row_vector(&[0.3, -0.7]));
        let w = tape.leaf(Matrix::identity(2));
        let b = tape.leaf(Matrix::zeros(1, 2));
        let h = tape.matmul(x, w);
        let y = tape.add_row_broadcast(h, b);
        assert_eq!(tape.value(y).data(), &[0.3, -0.7]);
    }

    #[test]
    fn square_gradient() {
        // f(w) = w^2 at w = 3 has gradient 6.
        let mut tape = Tape::new();
        let w = tape.leaf(Matrix::scalar(3.0));
        let f = tape.mul(w, w);
        let grads = tape.backward(f, &[w]).unwrap();
        let g = tape.value(grads[0].unwrap()).scalar_value();
        assert!((g - 6.0).abs() < 1e-12);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Matrix::scalar(2.0));
        let c = tape.leaf(Matrix::scalar(5.0));
        let f = tape.mul(c, c);
        let grads = tape.backward(f, &[w]).unwrap();
        assert!(grads[0].is_none());
    }

    #[test]
    fn backward_before_forward_is_an_error() {
        let mut tape = Tape::new();
        let err = tape.backward_seeded(NodeId(0), Matrix::scalar(1.0), &[]);
        assert!(matches!(err, Err(TensorError::BackwardBeforeForward)));
    }

    #[test]
    fn nonfinite_intermediate_is_reported_with_node_id() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::row_vector(&[0.0, 1.0]));
        let _bad = tape.log(x); // log(0) = -inf
        let err = tape.ensure_finite();
        match err {
            Err(TensorError::NonFinite { node, .. }) => assert_eq!(node, 1),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn jacobian_of_linear_map_is_the_matrix() {
        let a = Matrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.0, 3.0, 1.0]]);
        let b = vec![0.1, -0.2];
        let a2 = a.clone();
        let jac = jacobian(
            move |tape, z| {
                let w = tape.constant(a2.transpose());
                let bias = tape.constant(Matrix::row_vector(&b));
                let h = tape.matmul(z, w);
                tape.add_row_broadcast(h, bias)
            },
            &[0.3, 0.7, -0.4],
        )
        .unwrap();
        assert_eq!(jac.shape(), (2, 3));
        for i in 0..2 {
            for j in 0..3 {
                assert!((jac.get(i, j) - a.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jacobian_of_composed_affine_maps_is_the_product() {
        let a = Matrix::from_rows(&[vec![0.5, 1.5], vec![-1.0, 0.25]]);
        let b = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.3, -0.6]]);
        let (a2, b2) = (a.clone(), b.clone());
        let jac = jacobian(
            move |tape, z| {
                let wa = tape.constant(a2.transpose());
                let wb = tape.constant(b2.transpose());
                let h = tape.matmul(z, wa);
                tape.matmul(h, wb)
            },
            &[0.2, -0.9],
        )
        .unwrap();
        let want = b.matmul(&a);
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(jac.get(i, j), want.get(i, j));
            }
        }
    }

    #[test]
    fn batched_logdet_matches_direct_computation() {
        // Two SPD matrices: I and diag(2, 5).
        let mut tape = Tape::new();
        let g = tape.leaf(Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0, 1.0],
            vec![2.0, 0.0, 0.0, 5.0],
        ]));
        let ld = tape.batch_logdet_spd(g, 2);
        let v = tape.value(ld);
        assert!((v.get(0, 0) - 0.0).abs() < 1e-12);
        assert!((v.get(1, 0) - 10.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn logdet_gradient_is_inverse() {
        // d/dA logdet(A) = A^{-1}; check on diag(2, 5).
        let mut tape = Tape::new();
        let g = tape.leaf(Matrix::from_rows(&[vec![2.0, 0.0, 0.0, 5.0]]));
        let ld = tape.batch_logdet_spd(g, 2);
        let grads = tape.backward(ld, &[g]).unwrap();
        let gv = tape.value(grads[0].unwrap());
        let want = [0.5, 0.0, 0.0, 0.2];
        for (x, y) in gv.data().iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad_is_centered() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::row_vector(&[1.0, 2.0, 3.0]));
        let y = tape.softmax_rows(x);
        let s: f64 = tape.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        // Gradient of sum(softmax) is zero.
        let total = tape.sum_all(y);
        let grads = tape.backward(total, &[x]).unwrap();
        let gv = tape.value(grads[0].unwrap());
        for v in gv.data() {
            assert!(v.abs() < 1e-12);
        }
    }
}
