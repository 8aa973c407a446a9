//! Fused forward/backward kernels for span attention (deformable and fixed
//! windows) and interpolated-point attention. The tape records one node per
//! head and replays these kernels in the reverse sweep; everything backward
//! needs (geometry, boundary weights, softmax probabilities) is saved at
//! forward time.

use alloc::vec;
use alloc::vec::Vec;

use super::geometry::{boundary_weights, window_bounds, WeightRule, WindowDecision};
use crate::num;
use crate::tensor::Tensor;

/// Per-query scalar input: a column of values or one pinned constant.
#[derive(Debug, Clone)]
pub enum ColumnInput {
    PerQuery(Vec<f64>),
    Const(f64),
}

impl ColumnInput {
    #[inline]
    fn get(&self, j: usize) -> f64 {
        match self {
            ColumnInput::PerQuery(v) => v[j],
            ColumnInput::Const(c) => *c,
        }
    }
}

/// Span-attention configuration.
#[derive(Debug, Clone, Copy)]
pub struct SpanCfg {
    /// Valid (unpadded) length; queries at and beyond it emit zero rows.
    pub l_valid: usize,
    /// Logit scale, `1/sqrt(d_q)`.
    pub inv_sqrt_d: f64,
    /// Also multiply the attended value rows by the boundary weights
    /// (off by default; weights normally apply to keys only).
    pub weight_values: bool,
}

/// Forward state saved for the backward sweep and for dumping.
#[derive(Debug)]
pub struct SpanSaved {
    pub cfg: SpanCfg,
    /// Geometry per valid query (head/raw fields left at zero).
    pub geoms: Vec<WindowDecision>,
    /// Start of each query's span segment in the flat arrays below.
    pub starts: Vec<usize>,
    pub probs: Vec<f64>,
    pub weights: Vec<f64>,
    pub rules: Vec<WeightRule>,
}

impl SpanSaved {
    /// (geometry, weights, probabilities) for one query.
    pub fn query(&self, j: usize) -> (&WindowDecision, &[f64], &[f64]) {
        let g = &self.geoms[j];
        let s = self.starts[j];
        let e = s + g.activated();
        (g, &self.weights[s..e], &self.probs[s..e])
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Raw score matrix `Q K^T` over the valid range, `[lv, lv]` row-major.
/// Because each boundary weight scales a whole key row, the weighted logit
/// factorizes as `w * inv_sqrt_d * (Q K^T)`, so one dense product serves
/// every window.
fn score_matrix(q: &Tensor, k: &Tensor, lv: usize) -> Vec<f64> {
    let d = q.cols();
    let mut scores = vec![0.0; lv * lv];
    crate::tensor::gemm(
        lv,
        d,
        lv,
        1.0,
        q.data(),
        d as isize,
        1,
        k.data(),
        1,
        d as isize,
        0.0,
        &mut scores,
    );
    scores
}

/// Span attention forward pass over `q, k, v` (each `[L_pad, d]`).
pub fn span_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    sizes: &ColumnInput,
    offsets: &ColumnInput,
    cfg: SpanCfg,
) -> (Tensor, SpanSaved) {
    let (l_pad, d) = (q.rows(), q.cols());
    let lv = cfg.l_valid;
    let mut out = Tensor::zeros(l_pad, d);
    let mut geoms = Vec::with_capacity(lv);
    let mut starts = Vec::with_capacity(lv);
    let mut probs = Vec::new();
    let mut weights = Vec::new();
    let mut rules = Vec::new();

    let scores = score_matrix(q, k, lv);
    // Dense (weighted) probability matrix for the output product.
    let mut pdense = vec![0.0; lv * lv];
    let mut z = vec![0.0; lv];

    for j in 0..lv {
        let geom = window_bounds(j, sizes.get(j), offsets.get(j), lv);
        let bw = boundary_weights(&geom);
        let span = geom.activated();
        starts.push(probs.len());

        let srow = &scores[j * lv..(j + 1) * lv];
        let mut mx = f64::NEG_INFINITY;
        for (t, zt) in z[..span].iter_mut().enumerate() {
            *zt = bw.weights[t] * cfg.inv_sqrt_d * srow[geom.lo + t];
            if *zt > mx {
                mx = *zt;
            }
        }
        let mut sum = 0.0;
        for zt in z[..span].iter_mut() {
            *zt = num::exp(*zt - mx);
            sum += *zt;
        }
        let prow = &mut pdense[j * lv..(j + 1) * lv];
        for (t, zt) in z[..span].iter().enumerate() {
            let p = zt / sum;
            prow[geom.lo + t] = if cfg.weight_values { p * bw.weights[t] } else { p };
            probs.push(p);
        }

        weights.extend_from_slice(&bw.weights);
        rules.extend_from_slice(&bw.rules);
        geoms.push(geom);
    }

    // out[0..lv] = P V
    crate::tensor::gemm(
        lv,
        lv,
        d,
        1.0,
        &pdense,
        lv as isize,
        1,
        v.data(),
        d as isize,
        1,
        0.0,
        &mut out.data_mut()[..lv * d],
    );

    (out, SpanSaved { cfg, geoms, starts, probs, weights, rules })
}

/// Gradients produced by [`span_backward`].
pub struct SpanGrad {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// `[L_pad, 1]` gradient w.r.t. the per-query sizes.
    pub size: Tensor,
    /// `[L_pad, 1]` gradient w.r.t. the per-query offsets.
    pub offset: Tensor,
}

/// Reverse pass for span attention: two dense products recover the
/// probability/score gradients, the per-query loop handles softmax and the
/// affine weight rules, and two more dense products push gradients into the
/// query and key matrices.
pub fn span_backward(g: &Tensor, q: &Tensor, k: &Tensor, v: &Tensor, saved: &SpanSaved) -> SpanGrad {
    let (l_pad, d) = (q.rows(), q.cols());
    let cfg = saved.cfg;
    let lv = cfg.l_valid;
    let mut gq = Tensor::zeros(l_pad, d);
    let mut gk = Tensor::zeros(l_pad, d);
    let mut gv = Tensor::zeros(l_pad, d);
    let mut gsize = Tensor::zeros(l_pad, 1);
    let mut goffset = Tensor::zeros(l_pad, 1);

    let scores = score_matrix(q, k, lv);

    // Rebuild the dense (weighted) probability matrix.
    let mut pdense = vec![0.0; lv * lv];
    for j in 0..lv {
        let (geom, w, p) = saved.query(j);
        let prow = &mut pdense[j * lv..(j + 1) * lv];
        for t in 0..geom.activated() {
            prow[geom.lo + t] = if cfg.weight_values { p[t] * w[t] } else { p[t] };
        }
    }

    // g_M = g V^T over the valid range (M is the dense matrix in out = M V).
    let mut gm = vec![0.0; lv * lv];
    crate::tensor::gemm(
        lv,
        d,
        lv,
        1.0,
        g.data(),
        d as isize,
        1,
        v.data(),
        1,
        d as isize,
        0.0,
        &mut gm,
    );
    // g_V = M^T g.
    crate::tensor::gemm(
        lv,
        lv,
        d,
        1.0,
        &pdense,
        1,
        lv as isize,
        g.data(),
        d as isize,
        1,
        0.0,
        &mut gv.data_mut()[..lv * d],
    );

    // Per-query softmax/weight backward, filling the score gradient.
    let mut gscores = vec![0.0; lv * lv];
    for j in 0..lv {
        let (geom, w, p) = saved.query(j);
        let start = saved.starts[j];
        let span = geom.activated();
        let gmrow = &gm[j * lv..(j + 1) * lv];
        let srow = &scores[j * lv..(j + 1) * lv];

        // d loss / d p_t, plus the weight gradient through values when
        // value-weighting is on.
        let mut gp = vec![0.0; span];
        let mut gw_v = vec![0.0; span];
        for t in 0..span {
            let gmt = gmrow[geom.lo + t];
            if cfg.weight_values {
                gp[t] = w[t] * gmt;
                gw_v[t] = p[t] * gmt;
            } else {
                gp[t] = gmt;
            }
        }
        let pdot: f64 = p.iter().zip(&gp).map(|(pt, gt)| pt * gt).sum();
        let gsrow = &mut gscores[j * lv..(j + 1) * lv];
        let mut gs_acc = 0.0;
        let mut go_acc = 0.0;
        for t in 0..span {
            let gz = p[t] * (gp[t] - pdot);
            let coeff = gz * cfg.inv_sqrt_d;
            // z_t = w_t * inv * S[j, lo+t]
            gsrow[geom.lo + t] = coeff * w[t];
            let gwt = coeff * srow[geom.lo + t] + gw_v[t];
            let (cs, co) = saved.rules[start + t].grad_coeffs();
            gs_acc += cs * gwt;
            go_acc += co * gwt;
        }
        gsize.set(j, 0, gs_acc);
        goffset.set(j, 0, go_acc);
    }

    // g_Q = g_S K ; g_K = g_S^T Q.
    crate::tensor::gemm(
        lv,
        lv,
        d,
        1.0,
        &gscores,
        lv as isize,
        1,
        k.data(),
        d as isize,
        1,
        0.0,
        &mut gq.data_mut()[..lv * d],
    );
    crate::tensor::gemm(
        lv,
        lv,
        d,
        1.0,
        &gscores,
        1,
        lv as isize,
        q.data(),
        d as isize,
        1,
        0.0,
        &mut gk.data_mut()[..lv * d],
    );

    SpanGrad { q: gq, k: gk, v: gv, size: gsize, offset: goffset }
}

/// One interpolated sampling point.
#[derive(Debug, Clone, Copy)]
pub struct DcnPoint {
    pub i0: usize,
    pub i1: usize,
    pub frac: f64,
    /// False when the raw location was clamped to the sequence edge; the
    /// location gradient is gated off there.
    pub grad_gate: bool,
}

/// Forward state for interpolated-point attention.
#[derive(Debug)]
pub struct DcnSaved {
    pub l_valid: usize,
    pub n_points: usize,
    pub inv_sqrt_d: f64,
    /// `[l_valid * n_points]` row-major points.
    pub points: Vec<DcnPoint>,
    pub probs: Vec<f64>,
}

/// Attention over `n` linearly interpolated key/value rows per query.
pub fn dcn_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    locs: &Tensor,
    l_valid: usize,
    inv_sqrt_d: f64,
) -> (Tensor, DcnSaved) {
    let (l_pad, d) = (q.rows(), q.cols());
    let n = locs.cols();
    let last = (l_valid - 1) as f64;
    let mut out = Tensor::zeros(l_pad, d);
    let mut points = Vec::with_capacity(l_valid * n);
    let mut probs = Vec::with_capacity(l_valid * n);

    let mut interp = vec![0.0; d];
    for j in 0..l_valid {
        let qrow = q.row(j);
        let mut z = vec![0.0; n];
        let row_points_at = points.len();
        for (t, zt) in z.iter_mut().enumerate() {
            let raw = locs.at(j, t);
            let clamped = raw.clamp(0.0, last);
            let i0 = num::floor(clamped) as usize;
            let frac = clamped - i0 as f64;
            let i1 = if i0 < l_valid - 1 { i0 + 1 } else { i0 };
            points.push(DcnPoint { i0, i1, frac, grad_gate: raw == clamped });
            let (k0, k1) = (k.row(i0), k.row(i1));
            for (iv, (a, b)) in interp.iter_mut().zip(k0.iter().zip(k1)) {
                *iv = a + frac * (b - a);
            }
            *zt = inv_sqrt_d * dot(qrow, &interp);
        }
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for zt in z.iter_mut() {
            *zt = num::exp(*zt - mx);
            sum += *zt;
        }
        let orow = out.row_mut(j);
        for (t, zt) in z.iter().enumerate() {
            let p = zt / sum;
            probs.push(p);
            let pt = points[row_points_at + t];
            let (v0, v1) = (v.row(pt.i0), v.row(pt.i1));
            for (o, (a, b)) in orow.iter_mut().zip(v0.iter().zip(v1)) {
                *o += p * (a + pt.frac * (b - a));
            }
        }
    }

    (out, DcnSaved { l_valid, n_points: n, inv_sqrt_d, points, probs })
}

/// Gradients produced by [`dcn_backward`].
pub struct DcnGrad {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub locs: Tensor,
}

/// Reverse pass for interpolated-point attention.
pub fn dcn_backward(g: &Tensor, q: &Tensor, k: &Tensor, v: &Tensor, saved: &DcnSaved) -> DcnGrad {
    let (l_pad, d) = (q.rows(), q.cols());
    let n = saved.n_points;
    let mut gq = Tensor::zeros(l_pad, d);
    let mut gk = Tensor::zeros(l_pad, d);
    let mut gv = Tensor::zeros(l_pad, d);
    let mut glocs = Tensor::zeros(l_pad, n);

    let mut interp_k = vec![0.0; d];
    for j in 0..saved.l_valid {
        let base = j * n;
        let grow = g.row(j);
        let qrow = q.row(j);
        let p = &saved.probs[base..base + n];

        // gp_t = g . v~_t
        let mut gp = vec![0.0; n];
        for (t, gpt) in gp.iter_mut().enumerate() {
            let pt = saved.points[base + t];
            let (v0, v1) = (v.row(pt.i0), v.row(pt.i1));
            *gpt = grow
                .iter()
                .zip(v0.iter().zip(v1))
                .map(|(gg, (a, b))| gg * (a + pt.frac * (b - a)))
                .sum();
        }
        let pdot: f64 = p.iter().zip(&gp).map(|(pt, gt)| pt * gt).sum();

        for t in 0..n {
            let pt = saved.points[base + t];
            let gz = p[t] * (gp[t] - pdot);
            let coeff = gz * saved.inv_sqrt_d;
            let (k0, k1) = (k.row(pt.i0), k.row(pt.i1));
            for (iv, (a, b)) in interp_k.iter_mut().zip(k0.iter().zip(k1)) {
                *iv = a + pt.frac * (b - a);
            }
            // q path
            for (dq, kv) in gq.row_mut(j).iter_mut().zip(&interp_k) {
                *dq += coeff * kv;
            }
            // k path: g_k~ = coeff * q, split over the two integer rows
            let (w0, w1) = (1.0 - pt.frac, pt.frac);
            for (dk, qv) in gk.row_mut(pt.i0).iter_mut().zip(qrow) {
                *dk += coeff * w0 * qv;
            }
            if pt.i1 != pt.i0 {
                for (dk, qv) in gk.row_mut(pt.i1).iter_mut().zip(qrow) {
                    *dk += coeff * w1 * qv;
                }
            }
            // v path: g_v~ = p_t * g
            for (dv, gg) in gv.row_mut(pt.i0).iter_mut().zip(grow) {
                *dv += p[t] * w0 * gg;
            }
            if pt.i1 != pt.i0 {
                for (dv, gg) in gv.row_mut(pt.i1).iter_mut().zip(grow) {
                    *dv += p[t] * w1 * gg;
                }
            }
            // location path: d k~/d loc = k1 - k0, d v~/d loc = v1 - v0
            if pt.grad_gate && pt.i1 != pt.i0 {
                let (v0, v1) = (v.row(pt.i0), v.row(pt.i1));
                let dk_dot: f64 = qrow.iter().zip(k1.iter().zip(k0)).map(|(qv, (b, a))| qv * (b - a)).sum();
                let dv_dot: f64 = grow.iter().zip(v1.iter().zip(v0)).map(|(gg, (b, a))| gg * (b - a)).sum();
                glocs.set(j, t, coeff * dk_dot + p[t] * dv_dot);
            }
        }
    }

    DcnGrad { q: gq, k: gk, v: gv, locs: glocs }
}
