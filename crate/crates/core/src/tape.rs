//! Wengert-tape reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations append nodes to a [`Tape`]; node creation order is a valid
//! topological order, so the backward pass is a single reverse sweep with a
//! `match` per recorded operation. The tape is single-threaded; parameters
//! enter as shared leaves (`Arc<Tensor>`) so concurrent tapes can reference
//! one parameter set without copying.
//!
//! Reset rule: a tape only grows. `backward` is non-destructive (it returns
//! a fresh [`Gradients`] and may be called repeatedly); `reset` drops all
//! nodes. The training loop builds one tape per sample and drops it.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::kernel::{self, DcnSaved, SpanCfg, SpanSaved};
use crate::error::{CoreError, Result};
use crate::num;
use crate::tensor::{gemm, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-query window size fed to the span-attention kernel: either a tape
/// node (a `[L, 1]` column of scaled sizes) or a pinned constant.
#[derive(Debug, Clone, Copy)]
pub enum SizeSource {
    Node(NodeId),
    Const(f64),
}

/// Per-query window offset: a `[L, 1]` column node or pinned zero.
#[derive(Debug, Clone, Copy)]
pub enum OffsetSource {
    Node(NodeId),
    Zero,
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// a[m,k] @ b[k,n]
    Matmul { a: NodeId, b: NodeId },
    /// a[m,k] @ b[n,k]^T
    MatmulT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    AddScalar { a: NodeId },
    /// Value holds `a + constant`; backward is identity.
    AddConst { a: NodeId },
    /// Broadcast row[1,n] over a[m,n].
    AddRow { a: NodeId, row: NodeId },
    Sigmoid { a: NodeId },
    Tanh { a: NodeId },
    Relu { a: NodeId },
    /// Row softmax over columns `0..valid`; other columns get zero.
    SoftmaxRows { a: NodeId, valid: usize },
    ZeroRowsFrom { a: NodeId, from: usize },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        /// Per-row 1/sqrt(var+eps), then normalized values.
        inv_std: Vec<f64>,
        normalized: Tensor,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor,
    },
    Sum { a: NodeId },
    /// Mean over rows 0..valid -> [1, n].
    MeanRows { a: NodeId, valid: usize },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { a: NodeId, from: usize, len: usize },
    Dropout { a: NodeId, keep: f64, mask: Vec<u8> },
    SpanAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        size: SizeSource,
        offset: OffsetSource,
        saved: SpanSaved,
    },
    DcnAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        locs: NodeId,
        saved: DcnSaved,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of a node, if it received any contribution.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of a node, materializing zeros for nodes the loss never
    /// touched (an unused parameter has a zero adjoint).
    pub fn get_or_zeros(&self, id: NodeId, rows: usize, cols: usize) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(rows, cols),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

/// Recording tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

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

    /// Drop every recorded node.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    /// Value of a recorded node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// A differentiable leaf owning its value.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable constant.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf sharing storage with the caller (used for model parameters).
    pub fn shared_leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ---- arithmetic ------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Matmul { a, b }, rg))
    }

    /// `a @ b^T` without materializing the transpose.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(CoreError::ShapeMismatch {
                op: "matmul_t",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, 1.0, av.data(), k as isize, 1, bv.data(), 1, k as isize, 0.0, out.data_mut());
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatmulT { a, b }, rg))
    }

    fn elementwise(&mut self, op_name: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(CoreError::ShapeMismatch {
                op: op_name,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("add", a, b)?;
        let mut out = self.value(a).clone();
        out.axpy(1.0, self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("sub", a, b)?;
        let mut out = self.value(a).clone();
        out.axpy(-1.0, self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("mul", a, b)?;
        let out = Tensor::from_vec(
            self.value(a).rows(),
            self.value(a).cols(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x * y)
                .collect(),
        )?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale { a, c }, rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar { a }, rg)
    }

    /// `a + constant` for a full constant tensor (offset grids, positional
    /// encodings). The constant contributes no gradient.
    pub fn add_const(&mut self, a: NodeId, c: &Tensor) -> Result<NodeId> {
        if !self.value(a).same_shape(c) {
            return Err(CoreError::ShapeMismatch {
                op: "add_const",
                lhs: self.value(a).shape().to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let mut out = self.value(a).clone();
        out.axpy(1.0, c);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::AddConst { a }, rg))
    }

    /// Broadcast-add a `[1, n]` row over every row of `a[m, n]`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(CoreError::ShapeMismatch {
                op: "add_row",
                lhs: av.shape().to_vec(),
                rhs: rv.shape().to_vec(),
            });
        }
        let mut out = av.clone();
        let r = rv.data().to_vec();
        for i in 0..out.rows() {
            for (d, s) in out.row_mut(i).iter_mut().zip(&r) {
                *d += s;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow { a, row }, rg))
    }

    // ---- nonlinearities --------------------------------------------------

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(num::sigmoid);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid { a }, rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(num::tanh);
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh { a }, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu { a }, rg)
    }

    /// Row softmax (max-subtracted). Every row sums to 1.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let cols = self.value(a).cols();
        self.masked_softmax_rows(a, cols)
    }

    /// Row softmax over columns `0..valid`; the remaining columns are
    /// excluded (treated as -inf scores) and emit exactly zero.
    pub fn masked_softmax_rows(&mut self, a: NodeId, valid: usize) -> Result<NodeId> {
        let av = self.value(a);
        if valid == 0 || valid > av.cols() {
            return Err(CoreError::Contract("softmax needs 1 <= valid <= cols"));
        }
        let (m, n) = (av.rows(), av.cols());
        let mut out = Tensor::zeros(m, n);
        for r in 0..m {
            let row = av.row(r);
            let mut mx = f64::NEG_INFINITY;
            for &x in &row[..valid] {
                if x > mx {
                    mx = x;
                }
            }
            let orow = out.row_mut(r);
            let mut sum = 0.0;
            for c in 0..valid {
                let e = num::exp(row[c] - mx);
                orow[c] = e;
                sum += e;
            }
            for o in orow[..valid].iter_mut() {
                *o /= sum;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SoftmaxRows { a, valid }, rg))
    }

    /// Zero every row at index >= `from` (padded queries).
    pub fn zero_rows_from(&mut self, a: NodeId, from: usize) -> NodeId {
        let mut out = self.value(a).clone();
        let n = out.cols();
        for r in from..out.rows() {
            out.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
        }
        let _ = n;
        let rg = self.rg(&[a]);
        self.push(out, Op::ZeroRowsFrom { a, from }, rg)
    }

    /// Per-row normalization to mean 0 / variance 1, then `gain` and `bias`
    /// (both `[1, n]`).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(CoreError::Contract("layer_norm eps must be > 0"));
        }
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        let gv = self.value(gain);
        let bv = self.value(bias);
        if gv.rows() != 1 || gv.cols() != n || bv.rows() != 1 || bv.cols() != n {
            return Err(CoreError::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let gd = gv.data().to_vec();
        let bd = bv.data().to_vec();
        let mut normalized = Tensor::zeros(m, n);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Tensor::zeros(m, n);
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / num::sqrt(var + eps);
            inv_std.push(inv);
            let nrow = normalized.row_mut(r);
            for (xh, x) in nrow.iter_mut().zip(row) {
                *xh = (x - mean) * inv;
            }
            for (((o, xh), gg), bb) in
                out.row_mut(r).iter_mut().zip(normalized.row(r)).zip(&gd).zip(&bd)
            {
                *o = xh * gg + bb;
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, inv_std, normalized }, rg))
    }

    /// Mean negative log-softmax probability of the true classes.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let (b, c) = (lv.rows(), lv.cols());
        if labels.len() != b {
            return Err(CoreError::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if b == 0 {
            return Err(CoreError::Contract("cross_entropy needs at least one row"));
        }
        for &y in labels {
            if y >= c {
                return Err(CoreError::IndexOutOfRange { what: "label", index: y, bound: c });
            }
        }
        let mut probs = Tensor::zeros(b, c);
        let mut loss = 0.0;
        for r in 0..b {
            let row = lv.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = num::exp(row[j] - mx);
                probs.set(r, j, e);
                sum += e;
            }
            for j in 0..c {
                probs.set(r, j, probs.at(r, j) / sum);
            }
            // ln softmax = (z - mx) - ln sum
            loss -= row[labels[r]] - mx - num::ln(sum);
        }
        loss /= b as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    /// Mean over rows `0..valid` -> `[1, n]` (masked pooling).
    pub fn mean_rows(&mut self, a: NodeId, valid: usize) -> Result<NodeId> {
        let av = self.value(a);
        if valid == 0 || valid > av.rows() {
            return Err(CoreError::Contract("mean_rows needs 1 <= valid <= rows"));
        }
        let n = av.cols();
        let mut out = Tensor::zeros(1, n);
        for r in 0..valid {
            for (o, x) in out.data_mut().iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        out.scale_in_place(1.0 / valid as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MeanRows { a, valid }, rg))
    }

    /// Concatenate along columns; all parts share a row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(CoreError::Contract("concat_cols needs at least one part"));
        }
        let m = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor::zeros(m, total);
        let mut col = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != m {
                return Err(CoreError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![m],
                    rhs: pv.shape().to_vec(),
                });
            }
            let w = pv.cols();
            for r in 0..m {
                out.row_mut(r)[col..col + w].copy_from_slice(pv.row(r));
            }
            col += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols { parts: parts.to_vec() }, rg))
    }

    /// Copy of columns `from..from+len`.
    pub fn slice_cols(&mut self, a: NodeId, from: usize, len: usize) -> Result<NodeId> {
        let av = self.value(a);
        if from + len > av.cols() {
            return Err(CoreError::IndexOutOfRange {
                what: "column slice",
                index: from + len,
                bound: av.cols(),
            });
        }
        let m = av.rows();
        let mut out = Tensor::zeros(m, len);
        for r in 0..m {
            out.row_mut(r).copy_from_slice(&av.row(r)[from..from + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceCols { a, from, len }, rg))
    }

    /// Inverted dropout: kept entries are scaled by 1/keep. `mask[i] != 0`
    /// marks a kept entry; the caller draws the mask so that randomness
    /// stays outside the tape.
    pub fn dropout(&mut self, a: NodeId, keep: f64, mask: Vec<u8>) -> Result<NodeId> {
        let av = self.value(a);
        if mask.len() != av.len() {
            return Err(CoreError::ShapeMismatch {
                op: "dropout",
                lhs: av.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(CoreError::Contract("dropout keep probability must be in (0, 1]"));
        }
        let inv = 1.0 / keep;
        let data = av
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| if m != 0 { x * inv } else { 0.0 })
            .collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Dropout { a, keep, mask }, rg))
    }

    // ---- fused attention kernels ----------------------------------------

    /// Deformable span attention over `q, k, v` (each `[L, d]`): per-query
    /// windows from `size`/`offset`, boundary-weighted keys, softmax over
    /// the span, output from unweighted values. Padded query rows (>= the
    /// kernel's valid length) are zero.
    pub fn span_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        size: SizeSource,
        offset: OffsetSource,
        cfg: SpanCfg,
    ) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if !qv.same_shape(kv) || !qv.same_shape(vv) {
            return Err(CoreError::ShapeMismatch {
                op: "span_attention",
                lhs: qv.shape().to_vec(),
                rhs: kv.shape().to_vec(),
            });
        }
        if cfg.l_valid == 0 || cfg.l_valid > qv.rows() {
            return Err(CoreError::Contract("span_attention needs 1 <= l_valid <= rows"));
        }
        let sizes = match size {
            SizeSource::Node(id) => {
                let sv = self.value(id);
                if sv.rows() != qv.rows() || sv.cols() != 1 {
                    return Err(CoreError::ShapeMismatch {
                        op: "span_attention sizes",
                        lhs: sv.shape().to_vec(),
                        rhs: vec![qv.rows(), 1],
                    });
                }
                kernel::ColumnInput::PerQuery(sv.data().to_vec())
            }
            SizeSource::Const(c) => kernel::ColumnInput::Const(c),
        };
        let offsets = match offset {
            OffsetSource::Node(id) => {
                let ov = self.value(id);
                if ov.rows() != qv.rows() || ov.cols() != 1 {
                    return Err(CoreError::ShapeMismatch {
                        op: "span_attention offsets",
                        lhs: ov.shape().to_vec(),
                        rhs: vec![qv.rows(), 1],
                    });
                }
                kernel::ColumnInput::PerQuery(ov.data().to_vec())
            }
            OffsetSource::Zero => kernel::ColumnInput::Const(0.0),
        };
        let (out, saved) = kernel::span_forward(qv, kv, vv, &sizes, &offsets, cfg);
        let rg = self.rg(&[q, k, v])
            || matches!(size, SizeSource::Node(id) if self.requires_grad(id))
            || matches!(offset, OffsetSource::Node(id) if self.requires_grad(id));
        Ok(self.push(out, Op::SpanAttention { q, k, v, size, offset, saved }, rg))
    }

    /// Span geometry and Eq-style boundary weights recorded by the last
    /// span-attention forward on this node, for dumping and statistics.
    pub fn span_saved(&self, id: NodeId) -> Option<&SpanSaved> {
        match &self.nodes[id.0].op {
            Op::SpanAttention { saved, .. } => Some(saved),
            _ => None,
        }
    }

    /// Attention over `n` interpolated sampling locations per query.
    /// `locs[L, n]` holds real-valued positions; rows at and beyond the
    /// kernel's valid length produce zero output.
    pub fn dcn_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        locs: NodeId,
        l_valid: usize,
        inv_sqrt_d: f64,
    ) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if !qv.same_shape(kv) || !qv.same_shape(vv) {
            return Err(CoreError::ShapeMismatch {
                op: "dcn_attention",
                lhs: qv.shape().to_vec(),
                rhs: kv.shape().to_vec(),
            });
        }
        let lv = self.value(locs);
        if lv.rows() != qv.rows() {
            return Err(CoreError::ShapeMismatch {
                op: "dcn_attention locs",
                lhs: lv.shape().to_vec(),
                rhs: qv.shape().to_vec(),
            });
        }
        if l_valid == 0 || l_valid > qv.rows() {
            return Err(CoreError::Contract("dcn_attention needs 1 <= l_valid <= rows"));
        }
        let (out, saved) = kernel::dcn_forward(qv, kv, vv, lv, l_valid, inv_sqrt_d);
        let rg = self.rg(&[q, k, v, locs]);
        Ok(self.push(out, Op::DcnAttention { q, k, v, locs, saved }, rg))
    }

    pub fn dcn_saved(&self, id: NodeId) -> Option<&DcnSaved> {
        match &self.nodes[id.0].op {
            Op::DcnAttention { saved, .. } => Some(saved),
            _ => None,
        }
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss. Returns adjoints for every node
    /// that contributed to the loss; requires-grad leaves that did not
    /// contribute read back as zero via [`Gradients::get_or_zeros`].
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(CoreError::Contract("backward requires a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, update: impl FnOnce(&mut Tensor)) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let v = self.value(id);
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(v.rows(), v.cols()));
        }
        update(slot.as_mut().unwrap());
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                // dA += G @ B^T
                self.accumulate(grads, *a, |da| {
                    gemm(m, n, k, 1.0, g.data(), n as isize, 1, bv.data(), 1, n as isize, 1.0, da.data_mut());
                });
                // dB += A^T @ G
                self.accumulate(grads, *b, |db| {
                    gemm(k, m, n, 1.0, av.data(), 1, k as isize, g.data(), n as isize, 1, 1.0, db.data_mut());
                });
            }
            Op::MatmulT { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                // C = A @ B^T ; dA += G @ B ; dB += G^T @ A
                self.accumulate(grads, *a, |da| {
                    gemm(m, n, k, 1.0, g.data(), n as isize, 1, bv.data(), k as isize, 1, 1.0, da.data_mut());
                });
                self.accumulate(grads, *b, |db| {
                    gemm(n, m, k, 1.0, g.data(), 1, n as isize, av.data(), k as isize, 1, 1.0, db.data_mut());
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |da| da.axpy(1.0, g));
                self.accumulate(grads, *b, |db| db.axpy(1.0, g));
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, |da| da.axpy(1.0, g));
                self.accumulate(grads, *b, |db| db.axpy(-1.0, g));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                self.accumulate(grads, *a, |da| {
                    for ((d, gg), x) in da.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *d += gg * x;
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for ((d, gg), x) in db.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *d += gg * x;
                    }
                });
            }
            Op::Scale { a, c } => {
                let c = *c;
                self.accumulate(grads, *a, |da| da.axpy(c, g));
            }
            Op::AddScalar { a } | Op::AddConst { a } => {
                self.accumulate(grads, *a, |da| da.axpy(1.0, g));
            }
            Op::ZeroRowsFrom { a, from } => {
                // Rows past `from` were constant zero in the output; their
                // adjoint must not flow back.
                let last = from.min(&g.rows()) * g.cols();
                self.accumulate(grads, *a, |da| {
                    for (d, s) in da.data_mut()[..last].iter_mut().zip(&g.data()[..last]) {
                        *d += s;
                    }
                });
            }
            Op::AddRow { a, row } => {
                self.accumulate(grads, *a, |da| da.axpy(1.0, g));
                self.accumulate(grads, *row, |dr| {
                    for r in 0..g.rows() {
                        for (d, s) in dr.data_mut().iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Sigmoid { a } => {
                let y = self.value(NodeId(idx)).clone();
                self.accumulate(grads, *a, |da| {
                    for ((d, gg), yv) in da.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += gg * yv * (1.0 - yv);
                    }
                });
            }
            Op::Tanh { a } => {
                let y = self.value(NodeId(idx)).clone();
                self.accumulate(grads, *a, |da| {
                    for ((d, gg), yv) in da.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += gg * (1.0 - yv * yv);
                    }
                });
            }
            Op::Relu { a } => {
                let x = self.value(*a).clone();
                self.accumulate(grads, *a, |da| {
                    for ((d, gg), xv) in da.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        if *xv > 0.0 {
                            *d += gg;
                        }
                    }
                });
            }
            Op::SoftmaxRows { a, valid } => {
                let p = self.value(NodeId(idx)).clone();
                let valid = *valid;
                self.accumulate(grads, *a, |da| {
                    for r in 0..p.rows() {
                        let prow = &p.row(r)[..valid];
                        let grow = &g.row(r)[..valid];
                        let dot: f64 = prow.iter().zip(grow).map(|(pv, gv)| pv * gv).sum();
                        for ((d, pv), gv) in
                            da.row_mut(r)[..valid].iter_mut().zip(prow).zip(grow)
                        {
                            *d += pv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, inv_std, normalized } => {
                let n = normalized.cols() as f64;
                let gv = self.value(*gain).clone();
                self.accumulate(grads, *x, |dx| {
                    for r in 0..normalized.rows() {
                        let grow = g.row(r);
                        let xh = normalized.row(r);
                        let inv = inv_std[r];
                        // dxhat = g * gain;
                        // dx = inv/n * (n*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for ((gg, gn), xv) in grow.iter().zip(gv.data()).zip(xh) {
                            let dxh = gg * gn;
                            s1 += dxh;
                            s2 += dxh * xv;
                        }
                        let inv_n = inv / n;
                        for (((d, gg), gn), xv) in
                            dx.row_mut(r).iter_mut().zip(grow).zip(gv.data()).zip(xh)
                        {
                            let dxh = gg * gn;
                            *d += inv_n * (n * dxh - s1 - xv * s2);
                        }
                    }
                });
                self.accumulate(grads, *gain, |dg| {
                    for r in 0..normalized.rows() {
                        for ((d, gg), xh) in
                            dg.data_mut().iter_mut().zip(g.row(r)).zip(normalized.row(r))
                        {
                            *d += gg * xh;
                        }
                    }
                });
                self.accumulate(grads, *bias, |db| {
                    for r in 0..g.rows() {
                        for (d, s) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let gs = g.item();
                let scale = gs / probs.rows() as f64;
                self.accumulate(grads, *logits, |dl| {
                    for r in 0..probs.rows() {
                        for (d, p) in dl.row_mut(r).iter_mut().zip(probs.row(r)) {
                            *d += scale * p;
                        }
                        dl.row_mut(r)[labels[r]] -= scale;
                    }
                });
            }
            Op::Sum { a } => {
                let gs = g.item();
                self.accumulate(grads, *a, |da| {
                    for d in da.data_mut() {
                        *d += gs;
                    }
                });
            }
            Op::MeanRows { a, valid } => {
                let valid = *valid;
                let inv = 1.0 / valid as f64;
                self.accumulate(grads, *a, |da| {
                    for r in 0..valid {
                        for (d, s) in da.row_mut(r).iter_mut().zip(g.row(0)) {
                            *d += s * inv;
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate(grads, p, |dp| {
                        for r in 0..dp.rows() {
                            for (d, s) in dp.row_mut(r).iter_mut().zip(&g.row(r)[col..col + w]) {
                                *d += s;
                            }
                        }
                    });
                    col += w;
                }
            }
            Op::SliceCols { a, from, len } => {
                let (from, len) = (*from, *len);
                self.accumulate(grads, *a, |da| {
                    for r in 0..g.rows() {
                        for (d, s) in da.row_mut(r)[from..from + len].iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Dropout { a, keep, mask } => {
                let inv = 1.0 / keep;
                let mask = mask.clone();
                self.accumulate(grads, *a, |da| {
                    for ((d, gg), m) in da.data_mut().iter_mut().zip(g.data()).zip(&mask) {
                        if *m != 0 {
                            *d += gg * inv;
                        }
                    }
                });
            }
            Op::SpanAttention { q, k, v, size, offset, saved } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let grad = kernel::span_backward(g, qv, kv, vv, saved);
                self.accumulate(grads, *q, |dq| dq.axpy(1.0, &grad.q));
                self.accumulate(grads, *k, |dk| dk.axpy(1.0, &grad.k));
                self.accumulate(grads, *v, |dv| dv.axpy(1.0, &grad.v));
                if let SizeSource::Node(id) = size {
                    self.accumulate(grads, *id, |ds| ds.axpy(1.0, &grad.size));
                }
                if let OffsetSource::Node(id) = offset {
                    self.accumulate(grads, *id, |dof| dof.axpy(1.0, &grad.offset));
                }
            }
            Op::DcnAttention { q, k, v, locs, saved } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let grad = kernel::dcn_backward(g, qv, kv, vv, saved);
                self.accumulate(grads, *q, |dq| dq.axpy(1.0, &grad.q));
                self.accumulate(grads, *k, |dk| dk.axpy(1.0, &grad.k));
                self.accumulate(grads, *v, |dv| dv.axpy(1.0, &grad.v));
                self.accumulate(grads, *locs, |dl| dl.axpy(1.0, &grad.locs));
            }
        }
    }
}
