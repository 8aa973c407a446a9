//! Trainer contracts: scheduler values, SGD semantics, the decision
//! learning-rate factor, descent sanity, determinism, early stopping, and
//! the gradient-check harness at engineered kink-free points.

mod common;

use dst_core::attention::AttentionVariant;
use dst_core::data::{self, SyntheticSpec};
use dst_core::model::{DstModel, ModelConfig, ParamKind};
use dst_core::tensor::Tensor;
use dst_core::trainer::{self, lr_at, OptState, Schedule, Sequential, TrainConfig};
use std::sync::Arc;

fn sched(t0: f64, t_mult: f64, min_lr: f64) -> Schedule {
    Schedule { t0, t_mult, min_lr }
}

#[test]
fn lr_at_cosine_values() {
    let s = sched(10.0, 2.0, 0.0);
    let base = 1.0;
    // Restart boundaries hit the max.
    assert!((lr_at(0.0, base, &s) - 1.0).abs() < 1e-12);
    assert!((lr_at(10.0, base, &s) - 1.0).abs() < 1e-12); // first restart
    assert!((lr_at(30.0, base, &s) - 1.0).abs() < 1e-12); // second restart (10 + 20)
    // Cycle end approaches the min.
    assert!(lr_at(10.0 - 1e-9, base, &s) < 1e-9);
    // Halfway through a cycle sits at the midpoint.
    assert!((lr_at(5.0, base, &s) - 0.5).abs() < 1e-12);
    let s2 = sched(10.0, 1.0, 0.2);
    assert!((lr_at(5.0, 1.0, &s2) - 0.6).abs() < 1e-12);
}

#[test]
fn lr_at_is_periodic_when_t_mult_is_one() {
    let s = sched(7.0, 1.0, 0.1);
    for i in 0..70 {
        let t = i as f64 * 0.31;
        assert!((lr_at(t, 0.9, &s) - lr_at(t + 7.0, 0.9, &s)).abs() < 1e-12);
    }
}

fn tiny_model(variant: AttentionVariant) -> DstModel {
    let config = ModelConfig {
        feature_dim: 8,
        d_model: 16,
        heads: 2,
        blocks: 2,
        ffn_multiplier: 2,
        classes: 4,
        variant,
        dropout: 0.0,
        max_len: 32,
        positional: false,
        weight_values: false,
    };
    DstModel::init(&config, 9).unwrap()
}

#[test]
fn sgd_step_semantics() {
    let mut model = tiny_model(AttentionVariant::Deformable);
    let params = model.parameters();
    let config = TrainConfig { momentum: 0.0, decision_lr_factor: 0.1, ..Default::default() };

    // Zero gradients with fresh state leave parameters unchanged.
    let zero_grads: Vec<Tensor> =
        params.iter().map(|p| Tensor::zeros(p.tensor.rows(), p.tensor.cols())).collect();
    let before: Vec<f64> = flat(&model);
    let mut opt = OptState::new(&model);
    trainer::step(&mut model, &zero_grads, &mut opt, 0.1, &config).unwrap();
    assert_eq!(before, flat(&model));

    // Unit gradient on everything: normal params move lr, decision params
    // move lr * factor (momentum 0).
    let unit_grads: Vec<Tensor> =
        params.iter().map(|p| Tensor::full(p.tensor.rows(), p.tensor.cols(), 2.0)).collect();
    let mut opt = OptState::new(&model);
    trainer::step(&mut model, &unit_grads, &mut opt, 0.1, &config).unwrap();
    let after: Vec<(String, ParamKind, f64)> = {
        let mut v = Vec::new();
        model.visit_params(|name, kind, t| v.push((name, kind, t.data()[0])));
        v
    };
    let mut checked_normal = false;
    let mut checked_decision = false;
    let mut i = 0;
    model.visit_params(|_, _, _| i += 1);
    let _ = i;
    for ((name, kind, now), was) in after.iter().zip(before.iter()) {
        let delta = was - now; // lr * grad = 0.1 * 2.0
        match kind {
            ParamKind::Normal => {
                assert!((delta - 0.2).abs() < 1e-12, "{name}: delta {delta}");
                checked_normal = true;
            }
            ParamKind::Decision => {
                assert!((delta - 0.02).abs() < 1e-12, "{name}: delta {delta}");
                checked_decision = true;
            }
        }
    }
    assert!(checked_normal && checked_decision);
}

fn flat(model: &DstModel) -> Vec<f64> {
    let mut out = Vec::new();
    model.visit_params(|_, _, t| out.push(t.data()[0]));
    out
}

#[test]
fn decision_factor_scales_update_norm_exactly() {
    // With momentum 0 and identical gradients, the decision update norm is
    // exactly factor times the unscaled one.
    let run = |factor: f64| -> f64 {
        let mut model = tiny_model(AttentionVariant::Deformable);
        let params = model.parameters();
        let grads: Vec<Tensor> = params
            .iter()
            .map(|p| {
                let mut t = Tensor::zeros(p.tensor.rows(), p.tensor.cols());
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v = 0.3 + 0.1 * (i % 5) as f64;
                }
                t
            })
            .collect();
        let before: Vec<Tensor> =
            params.iter().map(|p| (*p.tensor).clone()).collect();
        let mut opt = OptState::new(&model);
        let config =
            TrainConfig { momentum: 0.0, decision_lr_factor: factor, ..Default::default() };
        trainer::step(&mut model, &grads, &mut opt, 0.05, &config).unwrap();
        let mut sq = 0.0;
        let mut idx = 0;
        model.visit_params(|_, kind, t| {
            if kind == ParamKind::Decision {
                for (a, b) in t.data().iter().zip(before[idx].data()) {
                    sq += (a - b) * (a - b);
                }
            }
            idx += 1;
        });
        sq.sqrt()
    };
    let full = run(1.0);
    let tenth = run(0.1);
    assert!(full > 0.0);
    assert!((tenth - 0.1 * full).abs() < 1e-12 * full.max(1.0));
}

#[test]
fn repeated_batch_descent_is_monotone() {
    // Gradient descent (momentum 0) on one repeated batch at lr 1e-3.
    let spec = SyntheticSpec { feature_dim: 8, len_min: 8, len_max: 12, ..Default::default() };
    let samples = data::generate(&spec, 8).unwrap();
    let mut model = tiny_model(AttentionVariant::Deformable);
    let config = TrainConfig { momentum: 0.0, decision_lr_factor: 0.1, ..Default::default() };
    let mut opt = OptState::new(&model);

    let batch_loss_and_grads = |model: &DstModel| {
        let mut loss = 0.0;
        let mut acc: Option<Vec<Tensor>> = None;
        for s in &samples {
            let run = trainer::run_sample(model, &s.features, s.valid, s.label, None, true).unwrap();
            loss += run.loss / samples.len() as f64;
            let g = run.grads.unwrap();
            match &mut acc {
                None => {
                    let mut owned = g;
                    for t in owned.iter_mut() {
                        t.scale_in_place(1.0 / samples.len() as f64);
                    }
                    acc = Some(owned);
                }
                Some(acc) => {
                    for (a, t) in acc.iter_mut().zip(&g) {
                        a.axpy(1.0 / samples.len() as f64, t);
                    }
                }
            }
        }
        (loss, acc.unwrap())
    };

    let mut losses = Vec::new();
    for _ in 0..50 {
        let (loss, grads) = batch_loss_and_grads(&model);
        losses.push(loss);
        trainer::step(&mut model, &grads, &mut opt, 1e-3, &config).unwrap();
    }
    let (final_loss, _) = batch_loss_and_grads(&model);
    losses.push(final_loss);
    for w in losses.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "loss increased: {} -> {}", w[0], w[1]);
    }
}

// ---- gradient checks ------------------------------------------------------

/// Gaussian elimination with partial pivoting for a square system.
fn solve_square(a_in: &[Vec<f64>], t: &[f64]) -> Vec<f64> {
    let n = a_in.len();
    let mut a: Vec<Vec<f64>> = a_in.to_vec();
    let mut b = t.to_vec();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        let diag = a[col][col];
        assert!(diag.abs() > 1e-12, "probe matrix singular");
        for row in col + 1..n {
            let f = a[row][col] / diag;
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    x
}

/// Minimum-norm solution of the underdetermined system `q @ c = t`
/// (`q` is L x d with L < d): `c = q^T (q q^T)^{-1} t`. The small solution
/// norm keeps the loss curvature mild, which central differences need.
fn solve_min_norm(q: &[Vec<f64>], t: &[f64]) -> Vec<f64> {
    let l = q.len();
    let d = q[0].len();
    let mut gram = vec![vec![0.0; l]; l];
    for i in 0..l {
        for j in 0..l {
            gram[i][j] = (0..d).map(|m| q[i][m] * q[j][m]).sum();
        }
    }
    let y = solve_square(&gram, t);
    (0..d).map(|m| (0..l).map(|i| q[i][m] * y[i]).sum()).collect()
}

/// Read the per-query decision logits feeding one layer's heads by setting
/// only that layer's decision columns to basis vectors (one forward per
/// basis index). Shallower layers keep their current matrices, so the input
/// reaching `layer` is exactly the final one; deeper layers cannot affect it.
fn probe_queries(
    model: &DstModel,
    sample: &dst_core::data::Sample,
    layer: usize,
) -> Vec<Vec<Vec<f64>>> {
    let heads = model.config.heads;
    let d_q = model.config.d_q();
    let l = sample.valid;
    // q[head][query][dim]
    let mut q = vec![vec![vec![0.0; d_q]; l]; heads];
    for m in 0..d_q {
        let mut probe = model.clone();
        for wd in probe.blocks[layer].attn.wd.iter_mut() {
            let mut t = Tensor::zeros(d_q, 2);
            t.set(m, 0, 1.0);
            t.set(m, 1, 1.0);
            *wd = Arc::new(t);
        }
        let mut tape = dst_core::tape::Tape::new();
        let fwd =
            dst_core::model::forward(&mut tape, &probe, &sample.features, sample.valid, None)
                .unwrap();
        for dec in &fwd.layers[layer].decisions {
            q[dec.head][dec.query][m] = dec.raw_size;
        }
    }
    q
}

/// Build a deformable model whose every query has frac(L), frac(R), frac(A)
/// at least 0.25 away from the nearest integer, by solving for the decision
/// matrices layer by layer.
fn kink_free_model(seed: u64, sample: &dst_core::data::Sample) -> DstModel {
    let config = ModelConfig {
        feature_dim: 8,
        d_model: 32,
        heads: 2,
        blocks: 2,
        ffn_multiplier: 2,
        classes: 4,
        variant: AttentionVariant::Deformable,
        dropout: 0.0,
        max_len: 32,
        positional: false,
        weight_values: false,
    };
    let mut model = DstModel::init(&config, seed).unwrap();
    let l = sample.valid;
    let lf = l as f64;
    let d_q = model.config.d_q();
    assert!(l < d_q, "construction needs L < d_q for a min-norm solve");

    // Per-head target sizes/offsets with all three fracs safely interior:
    // head 0: s=2.2, o=0.45 -> fracs (L,R,A) = (0.25, 0.65, 0.45)
    // head 1: s=2.5, o=0.75 -> fracs (0.25, 0.25, 0.75)
    let targets = [(2.2, 0.45), (2.5, 0.75)];

    for layer in 0..model.config.blocks {
        // Probe the query projections feeding this layer's decisions (all
        // shallower layers are already final).
        let q = probe_queries(&model, sample, layer);
        for head in 0..model.config.heads {
            let (s_t, o_t) = targets[head % targets.len()];
            let sig = s_t / lf;
            let s_logit = (sig / (1.0 - sig)).ln();
            let tt = o_t / lf;
            let o_logit = 0.5 * ((1.0 + tt) / (1.0 - tt)).ln();
            let col_s = solve_min_norm(&q[head], &vec![s_logit; l]);
            let col_o = solve_min_norm(&q[head], &vec![o_logit; l]);
            let mut wd = Tensor::zeros(d_q, 2);
            for m in 0..d_q {
                wd.set(m, 0, col_s[m]);
                wd.set(m, 1, col_o[m]);
            }
            model.blocks[layer].attn.wd[head] = Arc::new(wd);
        }
    }
    model
}

#[test]
fn grad_check_passes_at_kink_free_points() {
    let spec = SyntheticSpec { feature_dim: 8, len_min: 8, len_max: 8, ..Default::default() };
    let sample = &data::generate(&spec, 1).unwrap()[0];
    let model = kink_free_model(33, sample);

    // Verify the construction: every query's geometry is margin-safe.
    let mut tape = dst_core::tape::Tape::new();
    let fwd =
        dst_core::model::forward(&mut tape, &model, &sample.features, sample.valid, None).unwrap();
    for trace in &fwd.layers {
        for dec in &trace.decisions {
            for x in [dec.left, dec.right, dec.anchor] {
                let frac = x - x.floor();
                let dist = frac.min(1.0 - frac);
                assert!(dist >= 0.2, "frac margin violated: {x} (dist {dist})");
            }
        }
    }

    let report = trainer::grad_check(&model, sample, 0.2).unwrap();
    assert!(report.excluded.is_empty(), "no head should be excluded: {:?}", report.excluded);
    assert!(
        report.max_rel_err_normal < 1e-5,
        "non-decision rel err {}",
        report.max_rel_err_normal
    );
    let dec_err = report.max_rel_err_decision.expect("decision heads checked");
    assert!(dec_err < 1e-4, "decision rel err {dec_err}");
}

#[test]
fn grad_check_excludes_kinky_heads_instead_of_failing() {
    let spec = SyntheticSpec { feature_dim: 8, len_min: 8, len_max: 8, ..Default::default() };
    let sample = &data::generate(&spec, 1).unwrap()[0];
    let mut model = kink_free_model(34, sample);

    // Pin the last block's head-0 offsets to exactly zero: every anchor
    // sits on an integer (frac = 0), the canonical kink. Editing the last
    // block leaves the other solved layers' geometry untouched.
    let last = model.config.blocks - 1;
    let d_q = model.config.d_q();
    let mut wd = (*model.blocks[last].attn.wd[0]).clone();
    for m in 0..d_q {
        wd.set(m, 1, 0.0);
    }
    model.blocks[last].attn.wd[0] = Arc::new(wd);

    let report = trainer::grad_check(&model, sample, 0.2).unwrap();
    assert_eq!(report.excluded.len(), 1);
    assert_eq!((report.excluded[0].layer, report.excluded[0].head), (last, 0));
    assert_eq!(report.excluded[0].kinky_queries, sample.valid);
    // The kinky head's decision matrix was skipped, not compared: no group
    // entry carries its name.
    let skipped = format!("block{last}.attn.wd0");
    assert!(report.groups.iter().all(|g| g.name != skipped));
    // A window sitting exactly on a kink makes the loss discontinuous for
    // every parameter that moves the anchor, so tolerances are not asserted
    // here; the contract is exclusion + report instead of failure.
}

// ---- training loop --------------------------------------------------------

#[test]
fn training_is_bit_deterministic() {
    let spec = SyntheticSpec { feature_dim: 8, len_min: 8, len_max: 12, ..Default::default() };
    let samples = data::generate(&spec, 24).unwrap();
    let config = TrainConfig {
        epochs: 3,
        lr: 1e-3,
        batch_size: 8,
        val_fraction: 0.25,
        seed: 5,
        ..Default::default()
    };
    let run = || {
        let model = tiny_model(AttentionVariant::Deformable);
        let result = trainer::train(model, &samples, &config, &Sequential, |_| {}).unwrap();
        (
            result.log.iter().map(|e| e.train_loss.to_bits()).collect::<Vec<_>>(),
            result.log.iter().map(|e| e.val_ua.map(f64::to_bits)).collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn dropout_draws_are_part_of_the_seeded_stream() {
    let spec = SyntheticSpec { feature_dim: 8, len_min: 8, len_max: 12, ..Default::default() };
    let samples = data::generate(&spec, 16).unwrap();
    let mut model = tiny_model(AttentionVariant::Deformable);
    model.config.dropout = 0.2;
    let config =
        TrainConfig { epochs: 2, lr: 1e-3, batch_size: 8, val_fraction: 0.0, seed: 5, ..Default::default() };
    let run = |model: DstModel| {
        let result = trainer::train(model, &samples, &config, &Sequential, |_| {}).unwrap();
        result.log.iter().map(|e| e.train_loss.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(model.clone()), run(model));
}

#[test]
fn early_stopping_halts_after_patience() {
    let spec = SyntheticSpec { feature_dim: 8, len_min: 8, len_max: 12, ..Default::default() };
    let samples = data::generate(&spec, 24).unwrap();
    // Vanishing lr: the model never changes, so validation UA never improves
    // after the first epoch.
    let config = TrainConfig {
        epochs: 10,
        lr: 1e-30,
        batch_size: 8,
        val_fraction: 0.25,
        seed: 2,
        patience: Some(2),
        ..Default::default()
    };
    let model = tiny_model(AttentionVariant::Deformable);
    let result = trainer::train(model, &samples, &config, &Sequential, |_| {}).unwrap();
    assert_eq!(result.log.len(), 3, "1 improvement epoch + 2 patience epochs");
    assert_eq!(result.best_epoch, 0);
}

#[test]
fn evaluate_reports_full_pat_exactly_100() {
    let spec = SyntheticSpec { feature_dim: 8, len_min: 8, len_max: 12, ..Default::default() };
    let samples = data::generate(&spec, 8).unwrap();
    let model = tiny_model(AttentionVariant::Full);
    let (report, preds) = trainer::evaluate(&model, &samples, &Sequential).unwrap();
    assert_eq!(report.pat, Some(100.0));
    assert_eq!(preds.len(), 8);
    assert_eq!(report.samples, 8);
    // Determinism of the report across calls.
    let (again, _) = trainer::evaluate(&model, &samples, &Sequential).unwrap();
    assert_eq!(report, again);
}
