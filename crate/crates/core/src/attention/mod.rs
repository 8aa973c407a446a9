//! The four attention mechanisms: full, fixed-window, interpolated-point
//! ("DCN-like"), and deformable windows with boundary-weighted keys, plus
//! the decision network that predicts per-query window sizes and offsets.

pub mod geometry;
pub mod kernel;

use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::num;
use crate::tape::{NodeId, OffsetSource, SizeSource, Tape};
use crate::tensor::Tensor;

pub use geometry::{boundary_weights, window_bounds, BoundaryWeights, WeightRule, WindowDecision};
pub use kernel::SpanCfg;

/// Which attention mechanism a model uses. Fractions are relative to the
/// per-sample valid length and must lie in (0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttentionVariant {
    Full,
    FixedWindow { window_fraction: f64 },
    DcnLike { point_fraction: f64 },
    Deformable,
    /// Deformable offsets with the window size pinned to
    /// `size_fraction * L_valid` (the span then covers twice the fraction).
    DeformableFixedSize { size_fraction: f64 },
    /// Deformable sizes with the offset pinned to zero.
    DeformableZeroOffset,
}

impl AttentionVariant {
    pub const DEFAULT_WINDOW_FRACTION: f64 = 0.1;
    pub const DEFAULT_POINT_FRACTION: f64 = 0.1;
    pub const DEFAULT_SIZE_FRACTION: f64 = 0.05;

    /// True for the variants that carry a per-head decision matrix.
    pub fn needs_decision(&self) -> bool {
        matches!(
            self,
            AttentionVariant::Deformable
                | AttentionVariant::DeformableFixedSize { .. }
                | AttentionVariant::DeformableZeroOffset
        )
    }

    /// True for the variant that carries a per-head sampling-offset head.
    pub fn needs_sampler(&self) -> bool {
        matches!(self, AttentionVariant::DcnLike { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let frac = match self {
            AttentionVariant::FixedWindow { window_fraction } => Some(*window_fraction),
            AttentionVariant::DcnLike { point_fraction } => Some(*point_fraction),
            AttentionVariant::DeformableFixedSize { size_fraction } => Some(*size_fraction),
            _ => None,
        };
        if let Some(f) = frac {
            if !(f > 0.0 && f <= 1.0) {
                return Err(CoreError::InvalidConfig(alloc::format!(
                    "attention fraction {f} outside (0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Stable name used by configs and the command line.
    pub fn kind_name(&self) -> &'static str {
        match self {
            AttentionVariant::Full => "full",
            AttentionVariant::FixedWindow { .. } => "window",
            AttentionVariant::DcnLike { .. } => "dcn",
            AttentionVariant::Deformable => "deformable",
            AttentionVariant::DeformableFixedSize { .. } => "deformable-fixed-size",
            AttentionVariant::DeformableZeroOffset => "deformable-zero-offset",
        }
    }

    /// Parse a kind name, using the default fraction where one applies.
    pub fn from_kind_name(name: &str) -> Result<Self> {
        Ok(match name {
            "full" => AttentionVariant::Full,
            "window" => AttentionVariant::FixedWindow {
                window_fraction: Self::DEFAULT_WINDOW_FRACTION,
            },
            "dcn" => AttentionVariant::DcnLike { point_fraction: Self::DEFAULT_POINT_FRACTION },
            "deformable" => AttentionVariant::Deformable,
            "deformable-fixed-size" => AttentionVariant::DeformableFixedSize {
                size_fraction: Self::DEFAULT_SIZE_FRACTION,
            },
            "deformable-zero-offset" => AttentionVariant::DeformableZeroOffset,
            other => {
                return Err(CoreError::InvalidConfig(alloc::format!(
                    "unknown attention variant '{other}'"
                )))
            }
        })
    }

    pub fn fraction(&self) -> Option<f64> {
        match self {
            AttentionVariant::FixedWindow { window_fraction } => Some(*window_fraction),
            AttentionVariant::DcnLike { point_fraction } => Some(*point_fraction),
            AttentionVariant::DeformableFixedSize { size_fraction } => Some(*size_fraction),
            _ => None,
        }
    }

    /// Rebuild a variant from (kind, fraction), validating applicability.
    pub fn from_parts(kind: &str, fraction: Option<f64>) -> Result<Self> {
        let base = Self::from_kind_name(kind)?;
        let v = match (base, fraction) {
            (v, None) => v,
            (AttentionVariant::FixedWindow { .. }, Some(f)) => {
                AttentionVariant::FixedWindow { window_fraction: f }
            }
            (AttentionVariant::DcnLike { .. }, Some(f)) => {
                AttentionVariant::DcnLike { point_fraction: f }
            }
            (AttentionVariant::DeformableFixedSize { .. }, Some(f)) => {
                AttentionVariant::DeformableFixedSize { size_fraction: f }
            }
            (v, Some(_)) => {
                return Err(CoreError::InvalidConfig(alloc::format!(
                    "variant '{}' takes no fraction",
                    v.kind_name()
                )))
            }
        };
        v.validate()?;
        Ok(v)
    }
}

/// Multi-head attention parameters. Per-head query/key/value projections are
/// stored as column blocks of `[d_model, heads * d_q]` matrices (head `i`
/// owns columns `i*d_q..(i+1)*d_q`), with `heads * d_q == d_model`.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: Arc<Tensor>,
    pub wk: Arc<Tensor>,
    pub wv: Arc<Tensor>,
    /// Output projection `[heads * d_q, d_model]`.
    pub wo: Arc<Tensor>,
    /// Per-head decision matrices `[d_q, 2]`; empty unless the variant is
    /// deformable.
    pub wd: Vec<Arc<Tensor>>,
    /// Per-head sampling-offset heads `[d_q, n_max]`; empty unless the
    /// variant is DCN-like.
    pub ws: Vec<Arc<Tensor>>,
    pub heads: usize,
    pub d_q: usize,
}

impl AttentionParams {
    pub fn d_model(&self) -> usize {
        self.heads * self.d_q
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        let shape_ok = |t: &Tensor, r: usize, c: usize| t.rows() == r && t.cols() == c;
        if !shape_ok(&self.wq, d, d) || !shape_ok(&self.wk, d, d) || !shape_ok(&self.wv, d, d) || !shape_ok(&self.wo, d, d)
        {
            return Err(CoreError::InvalidConfig(alloc::format!(
                "attention projections must be [{d}, {d}]"
            )));
        }
        for w in &self.wd {
            if w.rows() != self.d_q || w.cols() != 2 {
                return Err(CoreError::InvalidConfig(alloc::format!(
                    "decision matrix must be [{}, 2]",
                    self.d_q
                )));
            }
        }
        for w in &self.ws {
            if w.rows() != self.d_q {
                return Err(CoreError::InvalidConfig(alloc::format!(
                    "sampler matrix must have {} rows",
                    self.d_q
                )));
            }
        }
        Ok(())
    }
}

/// Tape bindings for one attention layer.
#[derive(Debug, Clone)]
pub struct BoundAttention {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub wd: Vec<NodeId>,
    pub ws: Vec<NodeId>,
    pub heads: usize,
    pub d_q: usize,
}

/// Register attention parameters as shared differentiable leaves.
pub fn bind(tape: &mut Tape, p: &AttentionParams) -> BoundAttention {
    BoundAttention {
        wq: tape.shared_leaf(Arc::clone(&p.wq), true),
        wk: tape.shared_leaf(Arc::clone(&p.wk), true),
        wv: tape.shared_leaf(Arc::clone(&p.wv), true),
        wo: tape.shared_leaf(Arc::clone(&p.wo), true),
        wd: p.wd.iter().map(|w| tape.shared_leaf(Arc::clone(w), true)).collect(),
        ws: p.ws.iter().map(|w| tape.shared_leaf(Arc::clone(w), true)).collect(),
        heads: p.heads,
        d_q: p.d_q,
    }
}

/// One head's projected query/key/value nodes, each `[L, d_q]`.
#[derive(Debug, Clone, Copy)]
pub struct HeadProjection {
    pub q: NodeId,
    pub k: NodeId,
    pub v: NodeId,
}

/// Project `x` (self-attention: queries, keys and values all come from `x`)
/// into per-head `[L, d_q]` triples.
pub fn project_qkv(tape: &mut Tape, x: NodeId, p: &BoundAttention) -> Result<Vec<HeadProjection>> {
    let qc = tape.matmul(x, p.wq)?;
    let kc = tape.matmul(x, p.wk)?;
    let vc = tape.matmul(x, p.wv)?;
    let mut heads = Vec::with_capacity(p.heads);
    for i in 0..p.heads {
        let from = i * p.d_q;
        heads.push(HeadProjection {
            q: tape.slice_cols(qc, from, p.d_q)?,
            k: tape.slice_cols(kc, from, p.d_q)?,
            v: tape.slice_cols(vc, from, p.d_q)?,
        });
    }
    Ok(heads)
}

/// Decision-network outputs for one head.
#[derive(Debug, Clone, Copy)]
pub struct DecisionNodes {
    /// Raw `[L, 2]` logits (size column 0, offset column 1).
    pub raw: NodeId,
    /// Scaled sizes `[L, 1]`, each in (0, L_valid).
    pub sizes: NodeId,
    /// Scaled offsets `[L, 1]`, each in (-L_valid, L_valid).
    pub offsets: NodeId,
}

/// Per-query window decisions for a whole head: `sigmoid` squashes the size
/// logit and `tanh` the offset logit, both scaled by the valid length.
pub fn decide_windows(tape: &mut Tape, q_head: NodeId, wd: NodeId, l_valid: usize) -> Result<DecisionNodes> {
    if l_valid == 0 {
        return Err(CoreError::Contract("decide_windows needs l_valid >= 1"));
    }
    let raw = tape.matmul(q_head, wd)?;
    let sbar = tape.slice_cols(raw, 0, 1)?;
    let obar = tape.slice_cols(raw, 1, 1)?;
    let s01 = tape.sigmoid(sbar);
    let o11 = tape.tanh(obar);
    let sizes = tape.scale(s01, l_valid as f64);
    let offsets = tape.scale(o11, l_valid as f64);
    Ok(DecisionNodes { raw, sizes, offsets })
}

/// Single-query decision: `q_row` is `[1, d_q]`; returns scalar size and
/// offset nodes that stay on the tape.
pub fn decide_window(tape: &mut Tape, q_row: NodeId, wd: NodeId, l_valid: usize) -> Result<(NodeId, NodeId)> {
    let d = decide_windows(tape, q_row, wd, l_valid)?;
    Ok((d.sizes, d.offsets))
}

/// Full attention for one head with padded keys excluded and padded query
/// rows zeroed. Returns `(output, probability node)`.
pub fn full_attention(
    tape: &mut Tape,
    h: HeadProjection,
    l_valid: usize,
    d_q: usize,
) -> Result<(NodeId, NodeId)> {
    let scores = tape.matmul_t(h.q, h.k)?;
    let scaled = tape.scale(scores, 1.0 / num::sqrt(d_q as f64));
    let probs = tape.masked_softmax_rows(scaled, l_valid)?;
    let ctx = tape.matmul(probs, h.v)?;
    let out = tape.zero_rows_from(ctx, l_valid);
    Ok((out, probs))
}

/// Fixed centered window of half-width `round(fraction * L_valid / 2)`.
/// Integer geometry makes every boundary weight exactly 1, so this is the
/// span kernel with a pinned size and zero offset.
pub fn fixed_window_attention(
    tape: &mut Tape,
    h: HeadProjection,
    window_fraction: f64,
    l_valid: usize,
    d_q: usize,
) -> Result<NodeId> {
    let w = num::round(window_fraction * l_valid as f64 / 2.0);
    tape.span_attention(
        h.q,
        h.k,
        h.v,
        SizeSource::Const(w),
        OffsetSource::Zero,
        SpanCfg { l_valid, inv_sqrt_d: 1.0 / num::sqrt(d_q as f64), weight_values: false },
    )
}

/// Interpolated-point attention: a learned per-query head predicts `n`
/// real-valued sampling locations (`n = max(1, round(fraction * L_valid))`),
/// keys/values are gathered by linear interpolation and attended over.
/// Locations start integer-spaced around the query and travel by
/// `tanh`-squashed learned deltas scaled by the valid length.
pub fn dcn_like_attention(
    tape: &mut Tape,
    h: HeadProjection,
    ws: NodeId,
    point_fraction: f64,
    l_valid: usize,
    d_q: usize,
) -> Result<(NodeId, usize)> {
    let n_max = tape.value(ws).cols();
    let n = (num::round(point_fraction * l_valid as f64) as usize).max(1).min(n_max);
    let ws_used = tape.slice_cols(ws, 0, n)?;
    let raw = tape.matmul(h.q, ws_used)?;
    let squashed = tape.tanh(raw);
    let deltas = tape.scale(squashed, l_valid as f64);
    let l_pad = tape.value(h.q).rows();
    let mut base = Tensor::zeros(l_pad, n);
    for j in 0..l_pad {
        for t in 0..n {
            base.set(j, t, j as f64 + (t as f64 - (n as f64 - 1.0) / 2.0));
        }
    }
    let locs = tape.add_const(deltas, &base)?;
    let out = tape.dcn_attention(h.q, h.k, h.v, locs, l_valid, 1.0 / num::sqrt(d_q as f64))?;
    Ok((out, n))
}

/// Deformable attention for one head. Returns the output node and the
/// decision nodes when the variant computes any.
pub fn deformable_attention(
    tape: &mut Tape,
    h: HeadProjection,
    wd: Option<NodeId>,
    variant: AttentionVariant,
    l_valid: usize,
    d_q: usize,
    weight_values: bool,
) -> Result<(NodeId, Option<DecisionNodes>)> {
    let cfg = SpanCfg { l_valid, inv_sqrt_d: 1.0 / num::sqrt(d_q as f64), weight_values };
    let (size, offset, nodes) = match variant {
        AttentionVariant::Deformable => {
            let wd = wd.ok_or(CoreError::Contract("deformable attention needs a decision matrix"))?;
            let d = decide_windows(tape, h.q, wd, l_valid)?;
            (SizeSource::Node(d.sizes), OffsetSource::Node(d.offsets), Some(d))
        }
        AttentionVariant::DeformableFixedSize { size_fraction } => {
            let wd = wd.ok_or(CoreError::Contract("deformable attention needs a decision matrix"))?;
            let d = decide_windows(tape, h.q, wd, l_valid)?;
            (
                SizeSource::Const(size_fraction * l_valid as f64),
                OffsetSource::Node(d.offsets),
                Some(d),
            )
        }
        AttentionVariant::DeformableZeroOffset => {
            let wd = wd.ok_or(CoreError::Contract("deformable attention needs a decision matrix"))?;
            let d = decide_windows(tape, h.q, wd, l_valid)?;
            (SizeSource::Node(d.sizes), OffsetSource::Zero, Some(d))
        }
        other => {
            return Err(CoreError::InvalidConfig(alloc::format!(
                "deformable_attention called with variant '{}'",
                other.kind_name()
            )))
        }
    };
    let out = tape.span_attention(h.q, h.k, h.v, size, offset, cfg)?;
    Ok((out, nodes))
}

/// Where a head's attention trace lives on the tape, for dumping.
#[derive(Debug, Clone, Copy)]
pub enum HeadTrace {
    /// Span kernel node: geometry, weights, probabilities via `span_saved`.
    Span(NodeId),
    /// Full attention probability matrix `[L, L]`.
    Full { probs: NodeId },
    /// Interpolated-point kernel node via `dcn_saved`.
    Dcn(NodeId),
}

/// Attended-token count for one (head, query), PAT's raw material.
#[derive(Debug, Clone, Copy)]
pub struct ActivatedCount {
    pub head: usize,
    pub query: usize,
    pub count: usize,
}

/// Multi-head attention output.
pub struct MultiHeadOut {
    pub out: NodeId,
    /// Window decisions per (head, query); empty for the DCN-like variant
    /// (its activation counts still appear in `activated`).
    pub decisions: Vec<WindowDecision>,
    pub activated: Vec<ActivatedCount>,
    pub traces: Vec<HeadTrace>,
}

/// Run every head of one attention layer and apply the output projection.
pub fn multi_head(
    tape: &mut Tape,
    x: NodeId,
    p: &BoundAttention,
    variant: AttentionVariant,
    l_valid: usize,
    weight_values: bool,
) -> Result<MultiHeadOut> {
    variant.validate()?;
    let heads = project_qkv(tape, x, p)?;
    let mut outs = Vec::with_capacity(p.heads);
    let mut decisions = Vec::new();
    let mut activated = Vec::new();
    let mut traces = Vec::with_capacity(p.heads);

    for (i, h) in heads.into_iter().enumerate() {
        match variant {
            AttentionVariant::Full => {
                let (out, probs) = full_attention(tape, h, l_valid, p.d_q)?;
                outs.push(out);
                traces.push(HeadTrace::Full { probs });
                for j in 0..l_valid {
                    decisions.push(WindowDecision {
                        head: i,
                        query: j,
                        raw_size: 0.0,
                        raw_offset: 0.0,
                        size: l_valid as f64,
                        offset: 0.0,
                        anchor: j as f64,
                        left: 0.0,
                        right: (l_valid - 1) as f64,
                        lo: 0,
                        hi: l_valid - 1,
                        singleton: false,
                    });
                    activated.push(ActivatedCount { head: i, query: j, count: l_valid });
                }
            }
            AttentionVariant::FixedWindow { window_fraction } => {
                let out = fixed_window_attention(tape, h, window_fraction, l_valid, p.d_q)?;
                collect_span_decisions(tape, out, i, None, &mut decisions, &mut activated);
                outs.push(out);
                traces.push(HeadTrace::Span(out));
            }
            AttentionVariant::DcnLike { point_fraction } => {
                let (out, n) = dcn_like_attention(tape, h, p.ws[i], point_fraction, l_valid, p.d_q)?;
                for j in 0..l_valid {
                    activated.push(ActivatedCount { head: i, query: j, count: n });
                }
                outs.push(out);
                traces.push(HeadTrace::Dcn(out));
            }
            AttentionVariant::Deformable
            | AttentionVariant::DeformableFixedSize { .. }
            | AttentionVariant::DeformableZeroOffset => {
                let (out, nodes) =
                    deformable_attention(tape, h, p.wd.get(i).copied(), variant, l_valid, p.d_q, weight_values)?;
                let raw = nodes.map(|n| tape.value(n.raw).clone());
                collect_span_decisions(tape, out, i, raw.as_ref(), &mut decisions, &mut activated);
                outs.push(out);
                traces.push(HeadTrace::Span(out));
            }
        }
    }

    let concat = tape.concat_cols(&outs)?;
    let out = tape.matmul(concat, p.wo)?;
    Ok(MultiHeadOut { out, decisions, activated, traces })
}

fn collect_span_decisions(
    tape: &Tape,
    span_node: NodeId,
    head: usize,
    raw: Option<&Tensor>,
    decisions: &mut Vec<WindowDecision>,
    activated: &mut Vec<ActivatedCount>,
) {
    let saved = tape.span_saved(span_node).expect("span node");
    for (j, geom) in saved.geoms.iter().enumerate() {
        let mut dec = geom.clone();
        dec.head = head;
        if let Some(r) = raw {
            dec.raw_size = r.at(j, 0);
            dec.raw_offset = r.at(j, 1);
        }
        activated.push(ActivatedCount { head, query: j, count: dec.activated() });
        decisions.push(dec);
    }
}

/// Average percentage of activated tokens: the mean of
/// `span / L_valid * 100` over `(decision, L_valid)` pairs.
pub fn pat<'a, I>(items: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a WindowDecision, usize)>,
{
    let mut sum = 0.0;
    let mut count = 0usize;
    for (dec, l_valid) in items {
        sum += dec.activated() as f64 / l_valid as f64 * 100.0;
        count += 1;
    }
    if count == 0 {
        return Err(CoreError::Contract("pat needs at least one decision"));
    }
    Ok(sum / count as f64)
}
