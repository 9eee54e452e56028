//! Dense 2-D tensors and tape-based reverse-mode differentiation.
//!
//! The model is small enough that every value is a row-major `f64` matrix
//! (vectors are 1×n). Operations go through a [`Tape`]: each op computes its
//! value eagerly and records what the backward pass needs. Gradients are
//! exact derivatives of the recorded graph; the backward sweep visits ops in
//! reverse recording order, once each, so two backward calls over the same
//! tape produce bit-identical gradients.
//!
//! There is deliberately no broadcasting beyond row-vector bias addition and
//! no operator overloading — call sites name the op they mean.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};

/// Row-major matrix of f64 with optional gradient storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    /// Filled by [`Tape::backward`] for leaves that require grad.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols], requires_grad: false, grad: None }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length mismatch");
        Tensor { rows, cols, data, requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(1, 1, vec![v])
    }

    /// Marks the tensor as a differentiation target when placed on a tape.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar");
        self.data[0]
    }

    fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

pub type NodeId = usize;

/// Recorded operation; carries input ids plus whatever backward needs.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// rows of `a` plus broadcast row vector `v`
    AddRowVec(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    LayerNormRows {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    /// Embedding lookup over a token table; `mask_id` rows come from the
    /// dedicated mask-embedding vector instead of the table.
    EmbedSeq {
        table: NodeId,
        mask_vec: NodeId,
        ids: Vec<u32>,
        mask_id: u32,
    },
    /// Picks entries (r, c) of x into a 1×len row.
    GatherEntries {
        x: NodeId,
        coords: Vec<(usize, usize)>,
    },
    Sum(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Wengert list: owns every intermediate value of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Installs a tensor as a graph input.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    pub fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Gradient of the last backward target w.r.t. leaf `id`, if computed.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].value.grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].value.requires_grad
    }

    fn out(&mut self, mut value: Tensor, rg: bool, op: Op) -> NodeId {
        value.requires_grad = rg;
        self.push(value, op)
    }

    // ── forward ops ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.cols != tb.rows {
            return Err(CoreError::Shape {
                op: "matmul",
                detail: format!("{}x{} . {}x{}", ta.rows, ta.cols, tb.rows, tb.cols),
            });
        }
        let (m, k, n) = (ta.rows, ta.cols, tb.cols);
        let mut out = Tensor::zeros(m, n);
        matmul_kernel(&ta.data, &tb.data, m, k, n, &mut out.data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.out(out, rg, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let t = &self.nodes[x].value;
        let mut out = Tensor::zeros(t.cols, t.rows);
        transpose_kernel(&t.data, t.rows, t.cols, &mut out.data);
        let rg = self.rg(x);
        self.out(out, rg, Op::Transpose(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if !ta.same_shape(tb) {
            return Err(CoreError::Shape {
                op: "add",
                detail: format!("{}x{} vs {}x{}", ta.rows, ta.cols, tb.rows, tb.cols),
            });
        }
        let mut out = ta.clone();
        out.grad = None;
        for (o, &v) in out.data.iter_mut().zip(&tb.data) {
            *o += v;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.out(out, rg, Op::Add(a, b)))
    }

    /// `a[r, :] + v` for every row r; v is 1×cols.
    pub fn add_row_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (ta, tv) = (&self.nodes[a].value, &self.nodes[v].value);
        if tv.rows != 1 || tv.cols != ta.cols {
            return Err(CoreError::Shape {
                op: "add_row_vec",
                detail: format!("{}x{} + {}x{}", ta.rows, ta.cols, tv.rows, tv.cols),
            });
        }
        let mut out = ta.clone();
        out.grad = None;
        for r in 0..out.rows {
            let row = out.row_mut(r);
            for (o, &v) in row.iter_mut().zip(&tv.data) {
                *o += v;
            }
        }
        let rg = self.rg(a) || self.rg(v);
        Ok(self.out(out, rg, Op::AddRowVec(a, v)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if !ta.same_shape(tb) {
            return Err(CoreError::Shape {
                op: "mul",
                detail: format!("{}x{} vs {}x{}", ta.rows, ta.cols, tb.rows, tb.cols),
            });
        }
        let mut out = ta.clone();
        out.grad = None;
        for (o, &v) in out.data.iter_mut().zip(&tb.data) {
            *o *= v;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.out(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut out = self.nodes[x].value.clone();
        out.grad = None;
        for v in out.data.iter_mut() {
            *v *= c;
        }
        let rg = self.rg(x);
        self.out(out, rg, Op::Scale(x, c))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let mut out = self.nodes[x].value.clone();
        out.grad = None;
        for v in out.data.iter_mut() {
            *v = libm::tanh(*v);
        }
        let rg = self.rg(x);
        self.out(out, rg, Op::Tanh(x))
    }

    /// Per-row normalization followed by learned gain and bias (both 1×cols).
    pub fn layer_norm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tg, tb) = (&self.nodes[x].value, &self.nodes[gain].value, &self.nodes[bias].value);
        if tg.rows != 1 || tb.rows != 1 || tg.cols != tx.cols || tb.cols != tx.cols {
            return Err(CoreError::Shape {
                op: "layer_norm_rows",
                detail: format!(
                    "x {}x{}, gain {}x{}, bias {}x{}",
                    tx.rows, tx.cols, tg.rows, tg.cols, tb.rows, tb.cols
                ),
            });
        }
        let (r, c) = (tx.rows, tx.cols);
        let mut out = Tensor::zeros(r, c);
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / libm::sqrt(var + LN_EPS);
            inv_std[i] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat[i * c + j] = xh;
                out.data[i * c + j] = xh * tg.data[j] + tb.data[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.out(out, rg, Op::LayerNormRows { x, gain, bias, xhat, inv_std }))
    }

    /// Row-wise softmax, stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let tx = &self.nodes[x].value;
        let mut out = Tensor::zeros(tx.rows, tx.cols);
        for r in 0..tx.rows {
            softmax_row(tx.row(r), &mut out.data[r * tx.cols..(r + 1) * tx.cols]);
        }
        let rg = self.rg(x);
        self.out(out, rg, Op::SoftmaxRows(x))
    }

    /// Row-wise log-softmax (stable log-sum-exp).
    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let tx = &self.nodes[x].value;
        let (r, c) = (tx.rows, tx.cols);
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = tx.row(i);
            let mx = row_max(row);
            let lse = libm::log(row.iter().map(|&v| libm::exp(v - mx)).sum::<f64>()) + mx;
            for j in 0..c {
                out.data[i * c + j] = row[j] - lse;
            }
        }
        let rg = self.rg(x);
        self.out(out, rg, Op::LogSoftmaxRows(x))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, count: usize) -> Result<NodeId> {
        let tx = &self.nodes[x].value;
        if start + count > tx.rows {
            return Err(CoreError::IndexOutOfRange { what: "slice_rows", index: start + count, len: tx.rows });
        }
        let out = Tensor::from_vec(
            count,
            tx.cols,
            tx.data[start * tx.cols..(start + count) * tx.cols].to_vec(),
        );
        let rg = self.rg(x);
        Ok(self.out(out, rg, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, count: usize) -> Result<NodeId> {
        let tx = &self.nodes[x].value;
        if start + count > tx.cols {
            return Err(CoreError::IndexOutOfRange { what: "slice_cols", index: start + count, len: tx.cols });
        }
        let mut out = Tensor::zeros(tx.rows, count);
        for r in 0..tx.rows {
            out.data[r * count..(r + 1) * count]
                .copy_from_slice(&tx.row(r)[start..start + count]);
        }
        let rg = self.rg(x);
        Ok(self.out(out, rg, Op::SliceCols { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(CoreError::EmptySet { what: "concat_rows parts" });
        }
        let cols = self.nodes[parts[0]].value.cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = &self.nodes[p].value;
            if t.cols != cols {
                return Err(CoreError::Shape {
                    op: "concat_rows",
                    detail: format!("cols {} vs {}", t.cols, cols),
                });
            }
            rows += t.rows;
            data.extend_from_slice(&t.data);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.out(Tensor::from_vec(rows, cols, data), rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(CoreError::EmptySet { what: "concat_cols parts" });
        }
        let rows = self.nodes[parts[0]].value.rows;
        let total_cols: usize = parts.iter().map(|&p| self.nodes[p].value.cols).sum();
        for &p in parts {
            if self.nodes[p].value.rows != rows {
                return Err(CoreError::Shape {
                    op: "concat_cols",
                    detail: format!("rows {} vs {}", self.nodes[p].value.rows, rows),
                });
            }
        }
        let mut out = Tensor::zeros(rows, total_cols);
        let mut col0 = 0;
        for &p in parts {
            let t = &self.nodes[p].value;
            for r in 0..rows {
                out.data[r * total_cols + col0..r * total_cols + col0 + t.cols]
                    .copy_from_slice(t.row(r));
            }
            col0 += t.cols;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.out(out, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Looks up one embedding row per token id; `mask_id` rows come from
    /// `mask_vec` (1×d), everything else from `table` (V×d).
    pub fn embed_seq(
        &mut self,
        table: NodeId,
        mask_vec: NodeId,
        ids: &[u32],
        mask_id: u32,
    ) -> Result<NodeId> {
        let (tt, tm) = (&self.nodes[table].value, &self.nodes[mask_vec].value);
        if tm.rows != 1 || tm.cols != tt.cols {
            return Err(CoreError::Shape {
                op: "embed_seq",
                detail: format!("table {}x{}, mask {}x{}", tt.rows, tt.cols, tm.rows, tm.cols),
            });
        }
        let d = tt.cols;
        let mut out = Tensor::zeros(ids.len(), d);
        for (pos, &id) in ids.iter().enumerate() {
            let src = if id == mask_id {
                tm.row(0)
            } else {
                if id as usize >= tt.rows {
                    return Err(CoreError::IndexOutOfRange {
                        what: "embed_seq token",
                        index: id as usize,
                        len: tt.rows,
                    });
                }
                tt.row(id as usize)
            };
            out.row_mut(pos).copy_from_slice(src);
        }
        let rg = self.rg(table) || self.rg(mask_vec);
        Ok(self.out(out, rg, Op::EmbedSeq { table, mask_vec, ids: ids.to_vec(), mask_id }))
    }

    /// Gathers entries (r, c) into a 1×len row vector.
    pub fn gather_entries(&mut self, x: NodeId, coords: &[(usize, usize)]) -> Result<NodeId> {
        let tx = &self.nodes[x].value;
        let mut data = Vec::with_capacity(coords.len());
        for &(r, c) in coords {
            if r >= tx.rows || c >= tx.cols {
                return Err(CoreError::IndexOutOfRange {
                    what: "gather_entries",
                    index: r * tx.cols + c,
                    len: tx.data.len(),
                });
            }
            data.push(tx.at(r, c));
        }
        let rg = self.rg(x);
        Ok(self.out(
            Tensor::from_vec(1, coords.len(), data),
            rg,
            Op::GatherEntries { x, coords: coords.to_vec() },
        ))
    }

    /// Sum of all entries, as a 1×1 tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x].value.data.iter().sum();
        let rg = self.rg(x);
        self.out(Tensor::scalar(s), rg, Op::Sum(x))
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Backpropagates from a scalar loss with seed 1.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss].value.len() != 1 {
            return Err(CoreError::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got {}x{}", self.nodes[loss].value.rows, self.nodes[loss].value.cols),
            });
        }
        self.backward_from(loss, &[1.0])
    }

    /// General vector-Jacobian product: seeds `root`'s cotangent with `seed`
    /// and accumulates gradients into every reachable leaf that requires
    /// grad. Clears previous gradients first; may be called repeatedly on one
    /// tape (e.g. once per probe).
    pub fn backward_from(&mut self, root: NodeId, seed: &[f64]) -> Result<()> {
        let root_t = &self.nodes[root].value;
        if seed.len() != root_t.len() {
            return Err(CoreError::Shape {
                op: "backward_from",
                detail: format!("seed len {} vs root len {}", seed.len(), root_t.len()),
            });
        }
        if !root_t.requires_grad {
            return Err(CoreError::Domain {
                what: "backward_from",
                detail: format!("root node {root} does not require grad"),
            });
        }
        for n in self.nodes.iter_mut() {
            n.value.grad = None;
        }
        // Cotangents live outside the node list during the sweep so value
        // reads and gradient writes never alias.
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(seed.to_vec());
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            // Each op distributes its cotangent to inputs that require grad.
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    self.nodes[i].value.grad = Some(g);
                    continue;
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (self.nodes[a].value.rows, self.nodes[a].value.cols);
                    let n = self.nodes[b].value.cols;
                    if self.rg(a) {
                        // dA = G . B^T, materialize B^T for a vectorizable kernel
                        let tb = &self.nodes[b].value;
                        let mut bt = vec![0.0; tb.data.len()];
                        transpose_kernel(&tb.data, k, n, &mut bt);
                        let da = acc(&mut grads, a, m * k);
                        matmul_kernel(&g, &bt, m, n, k, da);
                    }
                    if self.rg(b) {
                        // dB = A^T . G via row-axpy
                        let ta = &self.nodes[a].value.data;
                        let db = acc(&mut grads, b, k * n);
                        for i2 in 0..m {
                            for kk in 0..k {
                                let aik = ta[i2 * k + kk];
                                if aik != 0.0 {
                                    let grow = &g[i2 * n..(i2 + 1) * n];
                                    let drow = &mut db[kk * n..(kk + 1) * n];
                                    for j in 0..n {
                                        drow[j] += aik * grow[j];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Transpose(x) => {
                    if self.rg(x) {
                        let (r, c) = (self.nodes[i].value.rows, self.nodes[i].value.cols);
                        let dx = acc(&mut grads, x, r * c);
                        // out was c0 x r0 transposed; route g back transposed
                        for a in 0..r {
                            for b in 0..c {
                                dx[b * r + a] += g[a * c + b];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for &src in &[a, b] {
                        if self.rg(src) {
                            let d = acc(&mut grads, src, g.len());
                            for (o, &v) in d.iter_mut().zip(&g) {
                                *o += v;
                            }
                        }
                    }
                }
                Op::AddRowVec(a, v) => {
                    if self.rg(a) {
                        let d = acc(&mut grads, a, g.len());
                        for (o, &gv) in d.iter_mut().zip(&g) {
                            *o += gv;
                        }
                    }
                    if self.rg(v) {
                        let cols = self.nodes[v].value.cols;
                        let d = acc(&mut grads, v, cols);
                        for (k2, &gv) in g.iter().enumerate() {
                            d[k2 % cols] += gv;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(a) {
                        let tb = self.nodes[b].value.data.clone();
                        let d = acc(&mut grads, a, g.len());
                        for ((o, &gv), &bv) in d.iter_mut().zip(&g).zip(&tb) {
                            *o += gv * bv;
                        }
                    }
                    if self.rg(b) {
                        let ta = self.nodes[a].value.data.clone();
                        let d = acc(&mut grads, b, g.len());
                        for ((o, &gv), &av) in d.iter_mut().zip(&g).zip(&ta) {
                            *o += gv * av;
                        }
                    }
                }
                Op::Scale(x, c) => {
                    if self.rg(x) {
                        let d = acc(&mut grads, x, g.len());
                        for (o, &gv) in d.iter_mut().zip(&g) {
                            *o += c * gv;
                        }
                    }
                }
                Op::Tanh(x) => {
                    if self.rg(x) {
                        let y = self.nodes[i].value.data.clone();
                        let d = acc(&mut grads, x, g.len());
                        for ((o, &gv), &yv) in d.iter_mut().zip(&g).zip(&y) {
                            *o += gv * (1.0 - yv * yv);
                        }
                    }
                }
                Op::LayerNormRows { x, gain, bias, xhat, inv_std } => {
                    let (r, c) = (self.nodes[i].value.rows, self.nodes[i].value.cols);
                    let gain_data = self.nodes[gain].value.data.clone();
                    if self.rg(gain) {
                        let d = acc(&mut grads, gain, c);
                        for i2 in 0..r {
                            for j in 0..c {
                                d[j] += g[i2 * c + j] * xhat[i2 * c + j];
                            }
                        }
                    }
                    if self.rg(bias) {
                        let d = acc(&mut grads, bias, c);
                        for i2 in 0..r {
                            for j in 0..c {
                                d[j] += g[i2 * c + j];
                            }
                        }
                    }
                    if self.rg(x) {
                        let d = acc(&mut grads, x, r * c);
                        for i2 in 0..r {
                            // dxhat = g * gain; dx = inv_std * (dxhat
                            //   - mean(dxhat) - xhat * mean(dxhat*xhat))
                            let gr = &g[i2 * c..(i2 + 1) * c];
                            let xh = &xhat[i2 * c..(i2 + 1) * c];
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..c {
                                let dxh = gr[j] * gain_data[j];
                                m1 += dxh;
                                m2 += dxh * xh[j];
                            }
                            m1 /= c as f64;
                            m2 /= c as f64;
                            let is = inv_std[i2];
                            for j in 0..c {
                                let dxh = gr[j] * gain_data[j];
                                d[i2 * c + j] += is * (dxh - m1 - xh[j] * m2);
                            }
                        }
                    }
                }
                Op::SoftmaxRows(x) => {
                    if self.rg(x) {
                        let y = self.nodes[i].value.data.clone();
                        let (r, c) = (self.nodes[i].value.rows, self.nodes[i].value.cols);
                        let d = acc(&mut grads, x, r * c);
                        for i2 in 0..r {
                            let yr = &y[i2 * c..(i2 + 1) * c];
                            let gr = &g[i2 * c..(i2 + 1) * c];
                            let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            for j in 0..c {
                                d[i2 * c + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
                Op::LogSoftmaxRows(x) => {
                    if self.rg(x) {
                        let y = self.nodes[i].value.data.clone();
                        let (r, c) = (self.nodes[i].value.rows, self.nodes[i].value.cols);
                        let d = acc(&mut grads, x, r * c);
                        for i2 in 0..r {
                            let yr = &y[i2 * c..(i2 + 1) * c];
                            let gr = &g[i2 * c..(i2 + 1) * c];
                            let gsum: f64 = gr.iter().sum();
                            for j in 0..c {
                                d[i2 * c + j] += gr[j] - libm::exp(yr[j]) * gsum;
                            }
                        }
                    }
                }
                Op::SliceRows { x, start } => {
                    if self.rg(x) {
                        let cols = self.nodes[i].value.cols;
                        let n = self.nodes[x].value.len();
                        let d = acc(&mut grads, x, n);
                        for (k2, &gv) in g.iter().enumerate() {
                            d[start * cols + k2] += gv;
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    if self.rg(x) {
                        let out_cols = self.nodes[i].value.cols;
                        let in_cols = self.nodes[x].value.cols;
                        let rows = self.nodes[i].value.rows;
                        let d = acc(&mut grads, x, rows * in_cols);
                        for r2 in 0..rows {
                            for j in 0..out_cols {
                                d[r2 * in_cols + start + j] += g[r2 * out_cols + j];
                            }
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let cols = self.nodes[i].value.cols;
                    let mut row0 = 0;
                    for &p in &parts {
                        let pr = self.nodes[p].value.rows;
                        if self.rg(p) {
                            let d = acc(&mut grads, p, pr * cols);
                            d.copy_from_slice(&g[row0 * cols..(row0 + pr) * cols]);
                        }
                        row0 += pr;
                    }
                }
                Op::ConcatCols(parts) => {
                    let total_cols = self.nodes[i].value.cols;
                    let rows = self.nodes[i].value.rows;
                    let mut col0 = 0;
                    for &p in &parts {
                        let pc = self.nodes[p].value.cols;
                        if self.rg(p) {
                            let d = acc(&mut grads, p, rows * pc);
                            for r2 in 0..rows {
                                for j in 0..pc {
                                    d[r2 * pc + j] += g[r2 * total_cols + col0 + j];
                                }
                            }
                        }
                        col0 += pc;
                    }
                }
                Op::EmbedSeq { table, mask_vec, ids, mask_id } => {
                    let d_cols = self.nodes[i].value.cols;
                    if self.rg(table) {
                        let n = self.nodes[table].value.len();
                        let d = acc(&mut grads, table, n);
                        for (pos, &id) in ids.iter().enumerate() {
                            if id != mask_id {
                                let base = id as usize * d_cols;
                                for j in 0..d_cols {
                                    d[base + j] += g[pos * d_cols + j];
                                }
                            }
                        }
                    }
                    if self.rg(mask_vec) {
                        let d = acc(&mut grads, mask_vec, d_cols);
                        for (pos, &id) in ids.iter().enumerate() {
                            if id == mask_id {
                                for j in 0..d_cols {
                                    d[j] += g[pos * d_cols + j];
                                }
                            }
                        }
                    }
                }
                Op::GatherEntries { x, coords } => {
                    if self.rg(x) {
                        let cols = self.nodes[x].value.cols;
                        let n = self.nodes[x].value.len();
                        let d = acc(&mut grads, x, n);
                        for (k2, &(r2, c2)) in coords.iter().enumerate() {
                            d[r2 * cols + c2] += g[k2];
                        }
                    }
                }
                Op::Sum(x) => {
                    if self.rg(x) {
                        let n = self.nodes[x].value.len();
                        let d = acc(&mut grads, x, n);
                        for o in d.iter_mut() {
                            *o += g[0];
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Gets (allocating on first touch) the cotangent buffer for node `id`.
fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

// ── kernels ──────────────────────────────────────────────────────────────

/// C += A . B with A m×k, B k×n. ikj loop order: the inner axpy over j is
/// independent across iterations, so it vectorizes without reassociation.
fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
}

fn transpose_kernel(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
}

fn row_max(row: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &v in row {
        if v > m {
            m = v;
        }
    }
    m
}

/// Stabilized softmax of one row into `out`.
pub fn softmax_row(row: &[f64], out: &mut [f64]) {
    let mx = row_max(row);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = libm::exp(v - mx);
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}
