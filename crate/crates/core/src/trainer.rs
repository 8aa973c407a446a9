//! Optimization: momentum SGD with cosine-annealing warm restarts, a scaled
//! learning rate for decision-network parameters, the training loop, and a
//! finite-difference gradient-check harness.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;


use crate::data::Sample;
use crate::error::{CoreError, Result};
use crate::metrics::{self, EvalReport, PatAccumulator};
use crate::model::{self, DstModel, ParamKind, TrainCtx};
use crate::num;
use crate::rng::{self, stream};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Cosine-annealing warm-restarts schedule.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct Schedule {
    /// First cycle length, in epochs.
    pub t0: f64,
    /// Cycle length multiplier at each restart.
    pub t_mult: f64,
    pub min_lr: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { t0: 10.0, t_mult: 2.0, min_lr: 0.0 }
    }
}

/// Learning rate at epoch position `t >= 0`:
/// `min + (base - min)/2 * (1 + cos(pi * t_cur / T_i))`, restarting at
/// cycle boundaries with `T_{i+1} = t_mult * T_i`.
pub fn lr_at(t: f64, base_lr: f64, sched: &Schedule) -> f64 {
    debug_assert!(t >= 0.0 && sched.t0 > 0.0 && sched.t_mult >= 1.0);
    let (t_cur, t_i) = if (sched.t_mult - 1.0).abs() < 1e-12 {
        // Constant cycle length.
        let t_cur = t % sched.t0;
        (t_cur, sched.t0)
    } else {
        // Find the cycle containing t: cumulative length of the first i
        // cycles is t0 * (m^i - 1) / (m - 1).
        let m = sched.t_mult;
        let mut start = 0.0;
        let mut t_i = sched.t0;
        while t >= start + t_i {
            start += t_i;
            t_i *= m;
        }
        (t - start, t_i)
    };
    sched.min_lr + 0.5 * (base_lr - sched.min_lr) * (1.0 + num::cos(core::f64::consts::PI * t_cur / t_i))
}

/// Training configuration.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub schedule: Schedule,
    /// Decision-network learning-rate factor.
    pub decision_lr_factor: f64,
    pub seed: u64,
    /// Fraction of the training set held out for validation.
    pub val_fraction: f64,
    /// Stop after this many epochs without validation-UA improvement.
    pub patience: Option<usize>,
    /// Optional global gradient-norm clip.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 120,
            lr: 5e-4,
            momentum: 0.9,
            batch_size: 32,
            schedule: Schedule::default(),
            decision_lr_factor: 0.1,
            seed: 0,
            val_fraction: 0.1,
            patience: None,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(CoreError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(CoreError::InvalidConfig("lr must be > 0".into()));
        }
        if !(self.decision_lr_factor > 0.0 && self.decision_lr_factor <= 1.0) {
            return Err(CoreError::InvalidConfig("decision_lr_factor must be in (0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(CoreError::InvalidConfig("val_fraction must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CoreError::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Momentum buffers; shapes mirror the canonical parameter order.
#[derive(Debug, Clone)]
pub struct OptState {
    pub velocity: Vec<Tensor>,
    pub step_count: usize,
}

impl OptState {
    pub fn new(model: &DstModel) -> Self {
        let mut velocity = Vec::new();
        model.visit_params(|_, _, t| velocity.push(Tensor::zeros(t.rows(), t.cols())));
        OptState { velocity, step_count: 0 }
    }
}

/// One momentum-SGD step; decision parameters move at
/// `lr * decision_lr_factor`.
pub fn step(
    model: &mut DstModel,
    grads: &[Tensor],
    opt: &mut OptState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    if grads.len() != opt.velocity.len() {
        return Err(CoreError::Contract("gradient list does not cover all parameters"));
    }
    // Optional global-norm clip.
    let clip_scale = match config.clip_norm {
        Some(max) => {
            let mut sq = 0.0;
            for g in grads {
                sq += g.data().iter().map(|v| v * v).sum::<f64>();
            }
            let norm = num::sqrt(sq);
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    let mut idx = 0;
    let mut bad: Option<CoreError> = None;
    model.visit_params_mut(|kind, p| {
        if bad.is_some() {
            return;
        }
        let g = &grads[idx];
        let v = &mut opt.velocity[idx];
        idx += 1;
        if !g.same_shape(p) {
            bad = Some(CoreError::ShapeMismatch {
                op: "sgd step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
            return;
        }
        let lr_eff = match kind {
            ParamKind::Decision => lr * config.decision_lr_factor,
            ParamKind::Normal => lr,
        };
        for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = config.momentum * *vv + clip_scale * gv;
            *pv -= lr_eff * *vv;
        }
    });
    if let Some(e) = bad {
        return Err(e);
    }
    opt.step_count += 1;
    Ok(())
}

/// Result of one sample's forward (and optional backward) pass.
pub struct SampleRun {
    pub loss: f64,
    pub pred: usize,
    pub label: usize,
    /// Gradients in canonical parameter order (present when training).
    pub grads: Option<Vec<Tensor>>,
    /// Activation ratios summed per (layer, head) plus the query count.
    pub pat: PatAccumulator,
}

/// Maps sample indices to results, possibly in parallel. Implementations
/// must return results in index order; the fixed order keeps gradient
/// accumulation deterministic regardless of thread count.
pub trait Executor: Sync {
    fn run(&self, n: usize, task: &(dyn Fn(usize) -> SampleRun + Sync)) -> Vec<SampleRun>;
}

/// Single-threaded executor.
pub struct Sequential;

impl Executor for Sequential {
    fn run(&self, n: usize, task: &(dyn Fn(usize) -> SampleRun + Sync)) -> Vec<SampleRun> {
        (0..n).map(task).collect()
    }
}

/// Forward/backward one sample. `dropout_words` seeds the dropout stream;
/// pass None for evaluation mode.
pub fn run_sample(
    model: &DstModel,
    features: &Tensor,
    valid: usize,
    label: usize,
    dropout_words: Option<(u64, &[u64])>,
    with_grads: bool,
) -> Result<SampleRun> {
    let mut tape = Tape::new();
    let fwd;
    match dropout_words {
        Some((seed, words)) if model.config.dropout > 0.0 => {
            let mut words_full = vec![stream::DROPOUT];
            words_full.extend_from_slice(words);
            let mut rng = rng::chacha(seed, &words_full);
            let mut ctx = TrainCtx { rng: &mut rng, dropout: model.config.dropout };
            fwd = model::forward(&mut tape, model, features, valid, Some(&mut ctx))?;
        }
        _ => {
            fwd = model::forward(&mut tape, model, features, valid, None)?;
        }
    }
    let loss = tape.cross_entropy(fwd.logits, &[label])?;
    let pred = model::predict_from_logits(tape.value(fwd.logits));

    let mut pat = PatAccumulator::new(model.config.blocks, model.config.heads);
    for (layer, trace) in fwd.layers.iter().enumerate() {
        for a in &trace.activated {
            pat.add(layer, a.head, a.count, valid);
        }
    }

    let grads = if with_grads {
        let g = tape.backward(loss)?;
        let mut out = Vec::with_capacity(fwd.bound.ordered.len());
        for &id in &fwd.bound.ordered {
            let v = tape.value(id);
            out.push(g.get_or_zeros(id, v.rows(), v.cols()));
        }
        Some(out)
    } else {
        None
    };

    Ok(SampleRun { loss: tape.value(loss).item(), pred, label, grads, pat })
}

/// Per-epoch log record.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_wa: Option<f64>,
    pub val_ua: Option<f64>,
    pub val_wf1: Option<f64>,
    pub val_pat: Option<f64>,
}

/// Training outcome: the retained model (best validation UA, or the final
/// model when there is no validation split) and the per-epoch log.
pub struct TrainResult {
    pub model: DstModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub final_train_loss: f64,
}

/// Evaluate a model over samples; returns the report and the predictions.
pub fn evaluate(
    model: &DstModel,
    samples: &[Sample],
    executor: &dyn Executor,
) -> Result<(EvalReport, Vec<usize>)> {
    if samples.is_empty() {
        return Err(CoreError::Contract("evaluate needs at least one sample"));
    }
    let results = run_all(model, samples, executor)?;
    let mut pat = PatAccumulator::new(model.config.blocks, model.config.heads);
    let mut preds = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for r in &results {
        pat.merge(&r.pat);
        preds.push(r.pred);
        labels.push(r.label);
    }
    let report = metrics::build_report(&preds, &labels, model.config.classes, Some(&pat))?;
    Ok((report, preds))
}

fn run_all(model: &DstModel, samples: &[Sample], executor: &dyn Executor) -> Result<Vec<SampleRun>> {
    let runs = executor.run(samples.len(), &|i| {
        let s = &samples[i];
        run_sample(model, &s.features, s.valid, s.label, None, false)
            .expect("evaluation forward failed")
    });
    Ok(runs)
}

/// Train a model. Batches are shuffled per epoch from the config seed, the
/// scheduler steps once per epoch, and the best model by validation UA is
/// retained. `on_epoch` fires after each epoch with the fresh log record.
pub fn train(
    model: DstModel,
    dataset: &[Sample],
    config: &TrainConfig,
    executor: &dyn Executor,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainResult> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(CoreError::Contract("train needs a nonempty dataset"));
    }

    // Deterministic validation split.
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut split_rng = rng::chacha(config.seed, &[stream::SPLIT]);
    for i in (1..order.len()).rev() {
        use rand::Rng;
        let j = split_rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_val = ((dataset.len() as f64) * config.val_fraction) as usize;
    let (val_idx, train_idx) = order.split_at(n_val);
    let val_set: Vec<Sample> = val_idx.iter().map(|&i| dataset[i].clone()).collect();
    let train_set: Vec<Sample> = train_idx.iter().map(|&i| dataset[i].clone()).collect();

    let mut current = model;
    let mut opt = OptState::new(&current);
    let mut best: Option<(f64, usize, DstModel)> = None;
    let mut log = Vec::with_capacity(config.epochs);
    let mut since_improvement = 0usize;
    let mut final_train_loss = f64::NAN;

    for epoch in 0..config.epochs {
        let lr = lr_at(epoch as f64, config.lr, &config.schedule);
        let batches = crate::data::batches(
            &train_set,
            config.batch_size,
            rng::mix(config.seed, &[stream::SHUFFLE, epoch as u64]),
        )?;

        let mut loss_sum = 0.0;
        let mut n_seen = 0usize;
        for batch in &batches {
            let model_ref = &current;
            let seed = config.seed;
            let runs = executor.run(batch.len(), &|bi| {
                let orig = batch.indices[bi];
                run_sample(
                    model_ref,
                    &batch.features[bi],
                    batch.valid[bi],
                    batch.labels[bi],
                    Some((seed, &[epoch as u64, orig as u64])),
                    true,
                )
                .expect("training forward failed")
            });
            // Fixed-order accumulation: mean gradient over the batch.
            let scale = 1.0 / batch.len() as f64;
            let mut acc: Option<Vec<Tensor>> = None;
            for r in &runs {
                loss_sum += r.loss;
                let g = r.grads.as_ref().expect("training run carries gradients");
                match &mut acc {
                    None => {
                        let mut owned = g.clone();
                        for t in owned.iter_mut() {
                            t.scale_in_place(scale);
                        }
                        acc = Some(owned);
                    }
                    Some(acc) => {
                        for (a, t) in acc.iter_mut().zip(g) {
                            a.axpy(scale, t);
                        }
                    }
                }
            }
            n_seen += batch.len();
            step(&mut current, &acc.unwrap(), &mut opt, lr, config)?;
        }
        let train_loss = loss_sum / n_seen as f64;
        final_train_loss = train_loss;

        let mut entry = EpochLog {
            epoch,
            lr,
            train_loss,
            val_wa: None,
            val_ua: None,
            val_wf1: None,
            val_pat: None,
        };
        if !val_set.is_empty() {
            let (report, _) = evaluate(&current, &val_set, executor)?;
            entry.val_wa = Some(report.wa);
            entry.val_ua = Some(report.ua);
            entry.val_wf1 = Some(report.wf1);
            entry.val_pat = report.pat;
            let improved = match &best {
                None => true,
                Some((best_ua, _, _)) => report.ua > *best_ua,
            };
            if improved {
                best = Some((report.ua, epoch, current.clone()));
                since_improvement = 0;
            } else {
                since_improvement += 1;
            }
        }
        on_epoch(&entry);
        log.push(entry);

        if let Some(patience) = config.patience {
            if since_improvement >= patience && !val_set.is_empty() {
                break;
            }
        }
    }

    let (best_epoch, retained) = match best {
        Some((_, e, m)) => (e, m),
        None => (config.epochs - 1, current),
    };
    Ok(TrainResult { model: retained, log, best_epoch, final_train_loss })
}

/// Result of checking one parameter group.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GroupCheck {
    pub name: String,
    pub is_decision: bool,
    pub entries: usize,
    pub max_rel_err: f64,
}

/// A decision head whose finite-difference comparison was skipped because a
/// query's window geometry sat too close to a floor/ceil kink.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ExcludedHead {
    pub layer: usize,
    pub head: usize,
    pub kinky_queries: usize,
}

/// Gradient-check report.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub excluded: Vec<ExcludedHead>,
    pub max_rel_err_normal: f64,
    /// None when every decision head was excluded or the variant has none.
    pub max_rel_err_decision: Option<f64>,
}

const FD_STEP: f64 = 1e-5;
/// Relative-error denominators are floored here; central differences on a
/// loss of order 1 carry about 1e-11 of roundoff.
const REL_FLOOR: f64 = 1e-5;

/// Compare tape gradients against central finite differences for every
/// parameter group. Decision heads with any query whose frac(L/R/A) lies
/// within `kink_margin` of an integer are excluded from the comparison and
/// reported separately (the loss is discontinuous across those kinks).
pub fn grad_check(model: &DstModel, sample: &Sample, kink_margin: f64) -> Result<GradCheckReport> {
    if !(kink_margin > 0.0 && kink_margin < 0.5) {
        return Err(CoreError::Contract("kink_margin must be in (0, 0.5)"));
    }

    // Analytic gradients plus window geometry at the base point.
    let base = run_sample(model, &sample.features, sample.valid, sample.label, None, true)?;
    let analytic = base.grads.expect("gradients requested");

    // Kink classification per (layer, head).
    let mut tape = Tape::new();
    let fwd = model::forward(&mut tape, model, &sample.features, sample.valid, None)?;
    let mut kinky: Vec<Vec<usize>> = vec![vec![0; model.config.heads]; model.config.blocks];
    for (layer, trace) in fwd.layers.iter().enumerate() {
        for dec in &trace.decisions {
            let near = |x: f64| num::dist_to_int(x) < kink_margin;
            if near(dec.left) || near(dec.right) || near(dec.anchor) {
                kinky[layer][dec.head] += 1;
            }
        }
    }
    drop(tape);

    let params = model.parameters();
    let mut groups = Vec::with_capacity(params.len());
    let mut excluded = Vec::new();
    let mut max_normal = 0.0f64;
    let mut max_decision: Option<f64> = None;

    for (pi, p) in params.iter().enumerate() {
        if p.kind == ParamKind::Decision {
            // Names look like "block{L}.attn.wd{H}".
            let (layer, head) = parse_decision_name(&p.name)?;
            if kinky[layer][head] > 0 {
                excluded.push(ExcludedHead { layer, head, kinky_queries: kinky[layer][head] });
                continue;
            }
        }
        let mut max_err = 0.0f64;
        for e in 0..p.tensor.len() {
            let fd = central_difference(model, sample, pi, e)?;
            let ad = analytic[pi].data()[e];
            let rel = num::abs(fd - ad) / num::abs(fd).max(num::abs(ad)).max(REL_FLOOR);
            if rel > max_err {
                max_err = rel;
            }
        }
        match p.kind {
            ParamKind::Normal => max_normal = max_normal.max(max_err),
            ParamKind::Decision => {
                max_decision = Some(max_decision.map_or(max_err, |m: f64| m.max(max_err)))
            }
        }
        groups.push(GroupCheck {
            name: p.name.clone(),
            is_decision: p.kind == ParamKind::Decision,
            entries: p.tensor.len(),
            max_rel_err: max_err,
        });
    }

    Ok(GradCheckReport { groups, excluded, max_rel_err_normal: max_normal, max_rel_err_decision: max_decision })
}

fn parse_decision_name(name: &str) -> Result<(usize, usize)> {
    // block{L}.attn.wd{H} or block{L}.attn.ws{H}
    let rest = name
        .strip_prefix("block")
        .ok_or(CoreError::Contract("unexpected decision parameter name"))?;
    let dot = rest.find('.').ok_or(CoreError::Contract("unexpected decision parameter name"))?;
    let layer: usize = rest[..dot]
        .parse()
        .map_err(|_| CoreError::Contract("unexpected decision parameter name"))?;
    let tail = &rest[dot..];
    let pos = tail
        .find("wd")
        .or_else(|| tail.find("ws"))
        .ok_or(CoreError::Contract("unexpected decision parameter name"))?;
    let head: usize = tail[pos + 2..]
        .parse()
        .map_err(|_| CoreError::Contract("unexpected decision parameter name"))?;
    Ok((layer, head))
}

fn central_difference(model: &DstModel, sample: &Sample, param_idx: usize, entry: usize) -> Result<f64> {
    let loss_at = |delta: f64| -> Result<f64> {
        let mut m = model.clone();
        let mut idx = 0;
        m.visit_params_mut(|_, t| {
            if idx == param_idx {
                t.data_mut()[entry] += delta;
            }
            idx += 1;
        });
        let run = run_sample(&m, &sample.features, sample.valid, sample.label, None, false)?;
        Ok(run.loss)
    };
    let plus = loss_at(FD_STEP)?;
    let minus = loss_at(-FD_STEP)?;
    Ok((plus - minus) / (2.0 * FD_STEP))
}
