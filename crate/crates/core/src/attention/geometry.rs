//! Window geometry and differentiable boundary weights.
//!
//! A decision `(s, o)` for query `j` puts an anchor at `A = j + o` and a
//! real-valued window `[A - s, A + s]`. The attended integer span is
//! `[floor(L), ceil(R)]` clamped to the valid sequence, and the four tokens
//! at the rounded boundaries/anchor get multiplicative weights that are
//! affine in `L`, `R`, `A` — floor/ceil are treated as constants during
//! differentiation, so size and offset gradients flow through the weights.

use alloc::vec::Vec;

use crate::num;

/// Per-(head, query) window decision.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowDecision {
    pub head: usize,
    pub query: usize,
    /// Pre-squash size logit; 0 when the size is pinned by the variant.
    pub raw_size: f64,
    /// Pre-squash offset logit; 0 when the offset is pinned.
    pub raw_offset: f64,
    /// Scaled size `s = sigmoid(raw) * L_valid`.
    pub size: f64,
    /// Scaled offset `o = tanh(raw) * L_valid`.
    pub offset: f64,
    /// Anchor `A = query + offset`.
    pub anchor: f64,
    /// Real lower bound `A - s` before clamping.
    pub left: f64,
    /// Real upper bound `A + s` before clamping.
    pub right: f64,
    /// First attended token, clamped into `[0, L_valid - 1]`.
    pub lo: usize,
    /// Last attended token (inclusive).
    pub hi: usize,
    /// True when the window fell entirely outside the sequence and was
    /// replaced by the single token nearest the anchor.
    pub singleton: bool,
}

impl WindowDecision {
    /// Number of attended tokens.
    pub fn activated(&self) -> usize {
        self.hi - self.lo + 1
    }
}

/// Which weight rule produced a token's weight (the rules apply in this
/// order, first match wins).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum WeightRule {
    /// Token `floor(L)`: weight `1 - (L - floor(L))`.
    LowerBoundary,
    /// Token `ceil(R)`: weight `1 - (ceil(R) - R)`.
    UpperBoundary,
    /// Token `floor(A)`: weight `1 + (ceil(A) - A)`.
    CenterFloor,
    /// Token `ceil(A)`: weight `1 + (A - floor(A))`.
    CenterCeil,
    /// Any other token: weight 1.
    Interior,
}

impl WeightRule {
    /// `(d weight / d size, d weight / d offset)` for the rule, using
    /// `L = j + o - s`, `R = j + o + s`, `A = j + o` with floor/ceil held
    /// constant.
    pub fn grad_coeffs(self) -> (f64, f64) {
        match self {
            WeightRule::LowerBoundary => (1.0, -1.0),
            WeightRule::UpperBoundary => (1.0, 1.0),
            WeightRule::CenterFloor => (0.0, -1.0),
            WeightRule::CenterCeil => (0.0, 1.0),
            WeightRule::Interior => (0.0, 0.0),
        }
    }
}

/// Multiplicative weights over a window span.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryWeights {
    pub lo: usize,
    pub hi: usize,
    /// One weight per token in `lo..=hi`.
    pub weights: Vec<f64>,
    /// The rule that produced each weight.
    pub rules: Vec<WeightRule>,
}

/// Window geometry for query `j` with scaled size `s` and offset `o`.
///
/// `head`, `raw_size`, and `raw_offset` are identity/bookkeeping fields the
/// caller may fill in afterwards; they default to zero here.
pub fn window_bounds(query: usize, size: f64, offset: f64, l_valid: usize) -> WindowDecision {
    debug_assert!(l_valid >= 1);
    let anchor = query as f64 + offset;
    let left = anchor - size;
    let right = anchor + size;
    let floor_l = num::floor(left) as i64;
    let ceil_r = num::ceil(right) as i64;
    let last = (l_valid - 1) as i64;

    let (lo, hi, singleton) = if ceil_r < 0 || floor_l > last {
        // Window entirely outside the sequence: fall back to the single
        // token nearest the anchor.
        let c = (num::round(anchor) as i64).clamp(0, last) as usize;
        (c, c, true)
    } else {
        (floor_l.max(0) as usize, ceil_r.min(last) as usize, false)
    };

    WindowDecision {
        head: 0,
        query,
        raw_size: 0.0,
        raw_offset: 0.0,
        size,
        offset,
        anchor,
        left,
        right,
        lo,
        hi,
        singleton,
    }
}

/// Boundary weights for a decision, one per token in `lo..=hi`.
///
/// Rule precedence is the listed order (lower boundary, upper boundary,
/// anchor floor, anchor ceil, interior); the first matching rule wins.
/// A boundary that was clamped away does not produce a boundary weight,
/// and a singleton fallback span gets weight 1.
pub fn boundary_weights(dec: &WindowDecision) -> BoundaryWeights {
    let span = dec.hi - dec.lo + 1;
    let mut weights = Vec::with_capacity(span);
    let mut rules = Vec::with_capacity(span);

    if dec.singleton {
        weights.push(1.0);
        rules.push(WeightRule::Interior);
        return BoundaryWeights { lo: dec.lo, hi: dec.hi, weights, rules };
    }

    let floor_l = num::floor(dec.left) as i64;
    let ceil_r = num::ceil(dec.right) as i64;
    let floor_a = num::floor(dec.anchor) as i64;
    let ceil_a = num::ceil(dec.anchor) as i64;
    let left_clamped = (dec.lo as i64) > floor_l;
    let right_clamped = (dec.hi as i64) < ceil_r;

    for k in dec.lo..=dec.hi {
        let ki = k as i64;
        let (w, rule) = if !left_clamped && ki == floor_l {
            (1.0 - (dec.left - floor_l as f64), WeightRule::LowerBoundary)
        } else if !right_clamped && ki == ceil_r {
            (1.0 - (ceil_r as f64 - dec.right), WeightRule::UpperBoundary)
        } else if ki == floor_a {
            (1.0 + (ceil_a as f64 - dec.anchor), WeightRule::CenterFloor)
        } else if ki == ceil_a {
            (1.0 + (dec.anchor - floor_a as f64), WeightRule::CenterCeil)
        } else {
            (1.0, WeightRule::Interior)
        };
        weights.push(w);
        rules.push(rule);
    }

    BoundaryWeights { lo: dec.lo, hi: dec.hi, weights, rules }
}
