//! Shared test helpers: finite-difference oracle and independent naive
//! attention implementations working on plain `Vec<Vec<f64>>` matrices.

#![allow(dead_code)]

use dst_core::tape::{NodeId, Tape};
use dst_core::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = rng.random_range(-scale..scale);
    }
    t
}

/// Relative error with a floor that absorbs central-difference roundoff.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Check tape adjoints of `build(tape, leaves)` (a scalar loss) against
/// central finite differences for every entry of every input.
/// Returns the maximum relative error observed.
pub fn finite_diff_check(
    build: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId,
    inputs: &[Tensor],
    eps: f64,
    floor: f64,
) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids);
    let grads = tape.backward(loss).expect("backward");

    let loss_for = |mutated: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = mutated.iter().map(|m| t.leaf(m.clone())).collect();
        let l = build(&mut t, &ids);
        t.value(l).item()
    };

    let mut max_err: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(ids[i], input.rows(), input.cols());
        for e in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= eps;
            let fd = (loss_for(&plus) - loss_for(&minus)) / (2.0 * eps);
            let err = rel_err(fd, analytic.data()[e], floor);
            max_err = max_err.max(err);
        }
    }
    max_err
}

// ---------------------------------------------------------------------
// Naive attention oracles, written directly from the per-query formulas
// on plain nested vectors. Deliberately independent of the tensor/tape
// implementation path.
// ---------------------------------------------------------------------

pub fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Full attention, one query at a time, keys restricted to the valid range.
pub fn naive_full(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], l_valid: usize) -> Vec<Vec<f64>> {
    let d = q[0].len();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![vec![0.0; d]; q.len()];
    for j in 0..l_valid {
        let z: Vec<f64> = (0..l_valid).map(|t| scale * dot(&q[j], &k[t])).collect();
        let p = softmax(&z);
        for (t, pt) in p.iter().enumerate() {
            for c in 0..d {
                out[j][c] += pt * v[t][c];
            }
        }
    }
    out
}

/// Fixed window of half-width `w` centered on the query, clipped to the
/// valid range.
pub fn naive_window(
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    w: usize,
    l_valid: usize,
) -> Vec<Vec<f64>> {
    let d = q[0].len();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![vec![0.0; d]; q.len()];
    for j in 0..l_valid {
        let lo = j.saturating_sub(w);
        let hi = (j + w).min(l_valid - 1);
        let z: Vec<f64> = (lo..=hi).map(|t| scale * dot(&q[j], &k[t])).collect();
        let p = softmax(&z);
        for (i, t) in (lo..=hi).enumerate() {
            for c in 0..d {
                out[j][c] += p[i] * v[t][c];
            }
        }
    }
    out
}

/// A literal per-query transcription of the deformable window equations:
/// decision logits -> sigmoid/tanh squash -> anchor and bounds -> rounded
/// span with the listed-order weight rules -> softmax over weighted keys ->
/// weighted sum of (unweighted) values.
#[derive(Debug, Clone)]
pub struct NaiveDecision {
    pub size: f64,
    pub offset: f64,
    pub anchor: f64,
    pub left: f64,
    pub right: f64,
    pub lo: usize,
    pub hi: usize,
    pub weights: Vec<f64>,
}

pub struct NaivePins {
    /// Pin sizes to this value instead of the decision output.
    pub size: Option<f64>,
    /// Pin offsets to zero.
    pub zero_offset: bool,
}

pub fn naive_deformable(
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    wd: &[Vec<f64>], // [d_q][2]
    l_valid: usize,
    pins: &NaivePins,
    weight_values: bool,
) -> (Vec<Vec<f64>>, Vec<NaiveDecision>) {
    let d = q[0].len();
    let scale = 1.0 / (d as f64).sqrt();
    let lf = l_valid as f64;
    let mut out = vec![vec![0.0; d]; q.len()];
    let mut decisions = Vec::with_capacity(l_valid);

    for j in 0..l_valid {
        // Eq: (s_bar, o_bar) = q_j . W^D ; s = sigmoid(s_bar) * L ; o = tanh(o_bar) * L
        let s_bar: f64 = (0..d).map(|c| q[j][c] * wd[c][0]).sum();
        let o_bar: f64 = (0..d).map(|c| q[j][c] * wd[c][1]).sum();
        let s = match pins.size {
            Some(pinned) => pinned,
            None => 1.0 / (1.0 + (-s_bar).exp()) * lf,
        };
        let o = if pins.zero_offset { 0.0 } else { o_bar.tanh() * lf };

        // Anchor and real bounds.
        let a = j as f64 + o;
        let left = a - s;
        let right = a + s;
        let fl = left.floor() as i64;
        let cr = right.ceil() as i64;
        let last = (l_valid - 1) as i64;

        let (lo, hi, singleton) = if cr < 0 || fl > last {
            let c = (a.round() as i64).clamp(0, last) as usize;
            (c, c, true)
        } else {
            (fl.max(0) as usize, cr.min(last) as usize, false)
        };

        // Weights in the listed rule order, first match wins; clamped-off
        // boundaries and the singleton fallback read as 1.
        let fa = a.floor() as i64;
        let ca = a.ceil() as i64;
        let mut weights = Vec::with_capacity(hi - lo + 1);
        for t in lo..=hi {
            let ti = t as i64;
            let w = if singleton {
                1.0
            } else if ti == fl && (lo as i64) <= fl {
                1.0 - (left - fl as f64)
            } else if ti == cr && cr <= (hi as i64) {
                1.0 - (cr as f64 - right)
            } else if ti == fa {
                1.0 + (ca as f64 - a)
            } else if ti == ca {
                1.0 + (a - fa as f64)
            } else {
                1.0
            };
            weights.push(w);
        }

        let z: Vec<f64> = (lo..=hi)
            .enumerate()
            .map(|(i, t)| scale * weights[i] * dot(&q[j], &k[t]))
            .collect();
        let p = softmax(&z);
        for (i, t) in (lo..=hi).enumerate() {
            let vw = if weight_values { weights[i] } else { 1.0 };
            for c in 0..d {
                out[j][c] += p[i] * vw * v[t][c];
            }
        }

        decisions.push(NaiveDecision { size: s, offset: o, anchor: a, left, right, lo, hi, weights });
    }
    (out, decisions)
}

/// Interpolated-point attention written from its documented construction:
/// integer-spaced base locations around the query plus tanh-squashed learned
/// deltas, linear-interpolated gathers, softmax over the points.
pub fn naive_dcn(
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    ws: &[Vec<f64>], // [d_q][n_max]
    n: usize,
    l_valid: usize,
) -> Vec<Vec<f64>> {
    let d = q[0].len();
    let scale = 1.0 / (d as f64).sqrt();
    let lf = l_valid as f64;
    let last = lf - 1.0;
    let mut out = vec![vec![0.0; d]; q.len()];
    for j in 0..l_valid {
        let mut kk = vec![vec![0.0; d]; n];
        let mut vv = vec![vec![0.0; d]; n];
        let mut z = vec![0.0; n];
        for t in 0..n {
            let r: f64 = (0..d).map(|c| q[j][c] * ws[c][t]).sum();
            let loc = j as f64 + (t as f64 - (n as f64 - 1.0) / 2.0) + r.tanh() * lf;
            let p = loc.clamp(0.0, last);
            let i0 = p.floor() as usize;
            let frac = p - i0 as f64;
            let i1 = (i0 + 1).min(l_valid - 1);
            for c in 0..d {
                kk[t][c] = (1.0 - frac) * k[i0][c] + frac * k[i1][c];
                vv[t][c] = (1.0 - frac) * v[i0][c] + frac * v[i1][c];
            }
            z[t] = scale * dot(&q[j], &kk[t]);
        }
        let p = softmax(&z);
        for t in 0..n {
            for c in 0..d {
                out[j][c] += p[t] * vv[t][c];
            }
        }
    }
    out
}

/// Max absolute difference between a tensor and nested-vec rows.
pub fn max_abs_diff(t: &Tensor, rows: &[Vec<f64>]) -> f64 {
    let mut m: f64 = 0.0;
    for r in 0..t.rows() {
        for c in 0..t.cols() {
            m = m.max((t.at(r, c) - rows[r][c]).abs());
        }
    }
    m
}
