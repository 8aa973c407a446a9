//! The encoder/classifier model: input projection, stacked blocks (attention
//! sublayer + feed-forward sublayer, post-norm residuals), masked mean
//! pooling, and a linear classifier head.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, ActivatedCount, AttentionParams, AttentionVariant, BoundAttention, HeadTrace, WindowDecision};
use crate::error::{CoreError, Result};
use crate::num;
use crate::rng::{self, stream};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Layer-norm epsilon used everywhere in the model.
pub const LN_EPS: f64 = 1e-5;

/// Small uniform scale for decision and sampler heads, so initial windows
/// start near size L/2 centered on the query.
pub const DECISION_INIT_SCALE: f64 = 1e-3;

/// Model hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_multiplier: usize,
    pub classes: usize,
    pub variant: AttentionVariant,
    /// Dropout rate applied after each sublayer during training.
    pub dropout: f64,
    pub max_len: usize,
    /// Add a sinusoidal positional encoding after the input projection
    /// (off by default; window geometry already carries position).
    pub positional: bool,
    /// Also multiply attended value rows by the boundary weights (off by
    /// default; weights normally apply to keys only).
    pub weight_values: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 32,
            d_model: 64,
            heads: 8,
            blocks: 4,
            ffn_multiplier: 4,
            classes: 4,
            variant: AttentionVariant::Deformable,
            dropout: 0.1,
            max_len: 326,
            positional: false,
            weight_values: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(CoreError::InvalidConfig(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        if self.blocks < 1 {
            return Err(CoreError::InvalidConfig("blocks must be >= 1".into()));
        }
        if self.classes < 2 {
            return Err(CoreError::InvalidConfig("classes must be >= 2".into()));
        }
        if self.feature_dim == 0 {
            return Err(CoreError::InvalidConfig("feature_dim must be >= 1".into()));
        }
        if self.ffn_multiplier == 0 {
            return Err(CoreError::InvalidConfig("ffn_multiplier must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        if self.max_len == 0 {
            return Err(CoreError::InvalidConfig("max_len must be >= 1".into()));
        }
        self.variant.validate()
    }

    pub fn d_q(&self) -> usize {
        self.d_model / self.heads
    }

    /// Column count of the sampling-offset head for the DCN-like variant.
    pub fn sampler_points(&self) -> usize {
        match self.variant {
            AttentionVariant::DcnLike { point_fraction } => {
                (num::round(point_fraction * self.max_len as f64) as usize).max(1)
            }
            _ => 0,
        }
    }
}

/// One block: attention sublayer + feed-forward sublayer with two norms.
#[derive(Debug, Clone)]
pub struct DstBlockParams {
    pub attn: AttentionParams,
    pub ln1_gain: Arc<Tensor>,
    pub ln1_bias: Arc<Tensor>,
    pub ffn_w1: Arc<Tensor>,
    pub ffn_b1: Arc<Tensor>,
    pub ffn_w2: Arc<Tensor>,
    pub ffn_b2: Arc<Tensor>,
    pub ln2_gain: Arc<Tensor>,
    pub ln2_bias: Arc<Tensor>,
}

/// Full parameter set.
#[derive(Debug, Clone)]
pub struct DstModel {
    pub config: ModelConfig,
    pub in_w: Arc<Tensor>,
    pub in_b: Arc<Tensor>,
    pub blocks: Vec<DstBlockParams>,
    pub cls_w: Arc<Tensor>,
    pub cls_b: Arc<Tensor>,
}

/// Whether a parameter belongs to a decision network (those get the scaled
/// learning rate) or to the rest of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Normal,
    Decision,
}

/// A named handle on one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamRef {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Arc<Tensor>,
}

impl DstModel {
    /// Deterministic initialization: linear weights are fan-in scaled
    /// uniform, biases zero, norms identity, decision/sampler heads small
    /// uniform. Draws happen in canonical parameter order.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<DstModel> {
        config.validate()?;
        let mut rng = rng::chacha(seed, &[stream::INIT]);
        let d = config.d_model;
        let ffn = config.ffn_multiplier * d;

        let linear = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| -> Arc<Tensor> {
            let bound = 1.0 / num::sqrt(rows as f64);
            let mut t = Tensor::zeros(rows, cols);
            for v in t.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
            Arc::new(t)
        };
        let small = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| -> Arc<Tensor> {
            let mut t = Tensor::zeros(rows, cols);
            for v in t.data_mut() {
                *v = rng.random_range(-DECISION_INIT_SCALE..DECISION_INIT_SCALE);
            }
            Arc::new(t)
        };
        let zeros = |_rng: &mut ChaCha8Rng, cols: usize| Arc::new(Tensor::zeros(1, cols));
        let ones = |cols: usize| Arc::new(Tensor::full(1, cols, 1.0));

        let in_w = linear(&mut rng, config.feature_dim, d);
        let in_b = zeros(&mut rng, d);

        let mut blocks = Vec::with_capacity(config.blocks);
        for _ in 0..config.blocks {
            let wq = linear(&mut rng, d, d);
            let wk = linear(&mut rng, d, d);
            let wv = linear(&mut rng, d, d);
            let wo = linear(&mut rng, d, d);
            let wd = if config.variant.needs_decision() {
                (0..config.heads).map(|_| small(&mut rng, config.d_q(), 2)).collect()
            } else {
                Vec::new()
            };
            let ws = if config.variant.needs_sampler() {
                let n_max = config.sampler_points();
                (0..config.heads).map(|_| small(&mut rng, config.d_q(), n_max)).collect()
            } else {
                Vec::new()
            };
            blocks.push(DstBlockParams {
                attn: AttentionParams {
                    wq,
                    wk,
                    wv,
                    wo,
                    wd,
                    ws,
                    heads: config.heads,
                    d_q: config.d_q(),
                },
                ln1_gain: ones(d),
                ln1_bias: zeros(&mut rng, d),
                ffn_w1: linear(&mut rng, d, ffn),
                ffn_b1: zeros(&mut rng, ffn),
                ffn_w2: linear(&mut rng, ffn, d),
                ffn_b2: zeros(&mut rng, d),
                ln2_gain: ones(d),
                ln2_bias: zeros(&mut rng, d),
            });
        }

        let cls_w = linear(&mut rng, d, config.classes);
        let cls_b = zeros(&mut rng, config.classes);

        Ok(DstModel { config: config.clone(), in_w, in_b, blocks, cls_w, cls_b })
    }

    /// Visit every parameter in canonical order (the checkpoint and
    /// optimizer order): input projection, then per block the attention
    /// projections, decision heads, sampler heads, first norm, feed-forward,
    /// second norm, and finally the classifier.
    pub fn visit_params(&self, mut f: impl FnMut(String, ParamKind, &Arc<Tensor>)) {
        f("in_proj.w".into(), ParamKind::Normal, &self.in_w);
        f("in_proj.b".into(), ParamKind::Normal, &self.in_b);
        for (bi, b) in self.blocks.iter().enumerate() {
            f(format!("block{bi}.attn.wq"), ParamKind::Normal, &b.attn.wq);
            f(format!("block{bi}.attn.wk"), ParamKind::Normal, &b.attn.wk);
            f(format!("block{bi}.attn.wv"), ParamKind::Normal, &b.attn.wv);
            f(format!("block{bi}.attn.wo"), ParamKind::Normal, &b.attn.wo);
            for (h, wd) in b.attn.wd.iter().enumerate() {
                f(format!("block{bi}.attn.wd{h}"), ParamKind::Decision, wd);
            }
            for (h, ws) in b.attn.ws.iter().enumerate() {
                f(format!("block{bi}.attn.ws{h}"), ParamKind::Decision, ws);
            }
            f(format!("block{bi}.ln1.gain"), ParamKind::Normal, &b.ln1_gain);
            f(format!("block{bi}.ln1.bias"), ParamKind::Normal, &b.ln1_bias);
            f(format!("block{bi}.ffn.w1"), ParamKind::Normal, &b.ffn_w1);
            f(format!("block{bi}.ffn.b1"), ParamKind::Normal, &b.ffn_b1);
            f(format!("block{bi}.ffn.w2"), ParamKind::Normal, &b.ffn_w2);
            f(format!("block{bi}.ffn.b2"), ParamKind::Normal, &b.ffn_b2);
            f(format!("block{bi}.ln2.gain"), ParamKind::Normal, &b.ln2_gain);
            f(format!("block{bi}.ln2.bias"), ParamKind::Normal, &b.ln2_bias);
        }
        f("classifier.w".into(), ParamKind::Normal, &self.cls_w);
        f("classifier.b".into(), ParamKind::Normal, &self.cls_b);
    }

    /// Mutable visit in canonical order. Copy-on-write: snapshots cloned
    /// from this model keep their values.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(ParamKind, &mut Tensor)) {
        f(ParamKind::Normal, Arc::make_mut(&mut self.in_w));
        f(ParamKind::Normal, Arc::make_mut(&mut self.in_b));
        for b in self.blocks.iter_mut() {
            f(ParamKind::Normal, Arc::make_mut(&mut b.attn.wq));
            f(ParamKind::Normal, Arc::make_mut(&mut b.attn.wk));
            f(ParamKind::Normal, Arc::make_mut(&mut b.attn.wv));
            f(ParamKind::Normal, Arc::make_mut(&mut b.attn.wo));
            for wd in b.attn.wd.iter_mut() {
                f(ParamKind::Decision, Arc::make_mut(wd));
            }
            for ws in b.attn.ws.iter_mut() {
                f(ParamKind::Decision, Arc::make_mut(ws));
            }
            f(ParamKind::Normal, Arc::make_mut(&mut b.ln1_gain));
            f(ParamKind::Normal, Arc::make_mut(&mut b.ln1_bias));
            f(ParamKind::Normal, Arc::make_mut(&mut b.ffn_w1));
            f(ParamKind::Normal, Arc::make_mut(&mut b.ffn_b1));
            f(ParamKind::Normal, Arc::make_mut(&mut b.ffn_w2));
            f(ParamKind::Normal, Arc::make_mut(&mut b.ffn_b2));
            f(ParamKind::Normal, Arc::make_mut(&mut b.ln2_gain));
            f(ParamKind::Normal, Arc::make_mut(&mut b.ln2_bias));
        }
        f(ParamKind::Normal, Arc::make_mut(&mut self.cls_w));
        f(ParamKind::Normal, Arc::make_mut(&mut self.cls_b));
    }

    /// Snapshot list of parameters in canonical order.
    pub fn parameters(&self) -> Vec<ParamRef> {
        let mut out = Vec::new();
        self.visit_params(|name, kind, t| {
            out.push(ParamRef { name, kind, tensor: Arc::clone(t) });
        });
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, _, t| n += t.len());
        n
    }
}

/// Tape bindings for the whole model, in canonical parameter order.
pub struct BoundModel {
    pub in_w: NodeId,
    pub in_b: NodeId,
    pub blocks: Vec<BoundBlock>,
    pub cls_w: NodeId,
    pub cls_b: NodeId,
    /// Node ids aligned with [`DstModel::parameters`].
    pub ordered: Vec<NodeId>,
}

pub struct BoundBlock {
    pub attn: BoundAttention,
    pub ln1_gain: NodeId,
    pub ln1_bias: NodeId,
    pub ffn_w1: NodeId,
    pub ffn_b1: NodeId,
    pub ffn_w2: NodeId,
    pub ffn_b2: NodeId,
    pub ln2_gain: NodeId,
    pub ln2_bias: NodeId,
}

/// Register every parameter on a tape as a shared differentiable leaf.
pub fn bind(tape: &mut Tape, model: &DstModel) -> BoundModel {
    let mut ordered = Vec::new();
    let in_w = tape.shared_leaf(Arc::clone(&model.in_w), true);
    let in_b = tape.shared_leaf(Arc::clone(&model.in_b), true);
    ordered.push(in_w);
    ordered.push(in_b);
    let mut blocks = Vec::with_capacity(model.blocks.len());
    for b in &model.blocks {
        let attn = attention::bind(tape, &b.attn);
        ordered.push(attn.wq);
        ordered.push(attn.wk);
        ordered.push(attn.wv);
        ordered.push(attn.wo);
        ordered.extend_from_slice(&attn.wd);
        ordered.extend_from_slice(&attn.ws);
        let bb = BoundBlock {
            attn,
            ln1_gain: tape.shared_leaf(Arc::clone(&b.ln1_gain), true),
            ln1_bias: tape.shared_leaf(Arc::clone(&b.ln1_bias), true),
            ffn_w1: tape.shared_leaf(Arc::clone(&b.ffn_w1), true),
            ffn_b1: tape.shared_leaf(Arc::clone(&b.ffn_b1), true),
            ffn_w2: tape.shared_leaf(Arc::clone(&b.ffn_w2), true),
            ffn_b2: tape.shared_leaf(Arc::clone(&b.ffn_b2), true),
            ln2_gain: tape.shared_leaf(Arc::clone(&b.ln2_gain), true),
            ln2_bias: tape.shared_leaf(Arc::clone(&b.ln2_bias), true),
        };
        ordered.push(bb.ln1_gain);
        ordered.push(bb.ln1_bias);
        ordered.push(bb.ffn_w1);
        ordered.push(bb.ffn_b1);
        ordered.push(bb.ffn_w2);
        ordered.push(bb.ffn_b2);
        ordered.push(bb.ln2_gain);
        ordered.push(bb.ln2_bias);
        blocks.push(bb);
    }
    let cls_w = tape.shared_leaf(Arc::clone(&model.cls_w), true);
    let cls_b = tape.shared_leaf(Arc::clone(&model.cls_b), true);
    ordered.push(cls_w);
    ordered.push(cls_b);
    BoundModel { in_w, in_b, blocks, cls_w, cls_b, ordered }
}

/// Dropout context during training: the caller owns the RNG so mask draws
/// stay deterministic per sample.
pub struct TrainCtx<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub dropout: f64,
}

fn maybe_dropout(tape: &mut Tape, x: NodeId, ctx: &mut Option<&mut TrainCtx<'_>>) -> Result<NodeId> {
    if let Some(ctx) = ctx {
        if ctx.dropout > 0.0 {
            let keep = 1.0 - ctx.dropout;
            let len = tape.value(x).len();
            let mask: Vec<u8> =
                (0..len).map(|_| u8::from(ctx.rng.random::<f64>() < keep)).collect();
            return tape.dropout(x, keep, mask);
        }
    }
    Ok(x)
}

/// Per-block forward trace.
pub struct LayerTrace {
    pub decisions: Vec<WindowDecision>,
    pub activated: Vec<ActivatedCount>,
    pub heads: Vec<HeadTrace>,
}

/// One block: `y = LN(x + Attn(x))`, `z = LN(y + FFN(y))` (post-norm).
pub fn block_forward(
    tape: &mut Tape,
    x: NodeId,
    block: &BoundBlock,
    variant: AttentionVariant,
    l_valid: usize,
    weight_values: bool,
    mut ctx: Option<&mut TrainCtx<'_>>,
) -> Result<(NodeId, LayerTrace)> {
    let mha = attention::multi_head(tape, x, &block.attn, variant, l_valid, weight_values)?;
    let attn_out = maybe_dropout(tape, mha.out, &mut ctx)?;
    let res1 = tape.add(x, attn_out)?;
    let y = tape.layer_norm(res1, block.ln1_gain, block.ln1_bias, LN_EPS)?;

    let h1 = tape.matmul(y, block.ffn_w1)?;
    let h1b = tape.add_row(h1, block.ffn_b1)?;
    let hrelu = tape.relu(h1b);
    let h2 = tape.matmul(hrelu, block.ffn_w2)?;
    let ffn_out = tape.add_row(h2, block.ffn_b2)?;
    let ffn_out = maybe_dropout(tape, ffn_out, &mut ctx)?;
    let res2 = tape.add(y, ffn_out)?;
    let z = tape.layer_norm(res2, block.ln2_gain, block.ln2_bias, LN_EPS)?;

    Ok((z, LayerTrace { decisions: mha.decisions, activated: mha.activated, heads: mha.traces }))
}

/// Full forward output.
pub struct ForwardOut {
    /// Classifier logits `[1, classes]`.
    pub logits: NodeId,
    pub layers: Vec<LayerTrace>,
    pub bound: BoundModel,
}

/// Sinusoidal positional encoding (ablation switch).
fn positional_encoding(rows: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros(rows, d);
    for pos in 0..rows {
        for i in 0..d {
            let angle = pos as f64 / num::powf(10000.0, (2 * (i / 2)) as f64 / d as f64);
            pe.set(pos, i, if i % 2 == 0 { num::sin(angle) } else { num::cos(angle) });
        }
    }
    pe
}

/// Project features, run every block, mean-pool over valid steps, classify.
///
/// `features` may carry padded rows; only `0..l_valid` is used, so appending
/// padding never changes the logits.
pub fn forward(
    tape: &mut Tape,
    model: &DstModel,
    features: &Tensor,
    l_valid: usize,
    mut ctx: Option<&mut TrainCtx<'_>>,
) -> Result<ForwardOut> {
    let cfg = &model.config;
    if l_valid == 0 || l_valid > features.rows() {
        return Err(CoreError::Contract("forward needs 1 <= l_valid <= feature rows"));
    }
    if l_valid > cfg.max_len {
        return Err(CoreError::LengthExceeded { len: l_valid, max: cfg.max_len });
    }
    if features.cols() != cfg.feature_dim {
        return Err(CoreError::ShapeMismatch {
            op: "forward features",
            lhs: features.shape().to_vec(),
            rhs: alloc::vec![l_valid, cfg.feature_dim],
        });
    }

    let bound = bind(tape, model);
    let x_in = tape.constant(features.head_rows(l_valid));
    let proj = tape.matmul(x_in, bound.in_w)?;
    let mut x = tape.add_row(proj, bound.in_b)?;
    if cfg.positional {
        let pe = positional_encoding(l_valid, cfg.d_model);
        x = tape.add_const(x, &pe)?;
    }

    let mut layers = Vec::with_capacity(cfg.blocks);
    for block in &bound.blocks {
        let (z, trace) =
            block_forward(tape, x, block, cfg.variant, l_valid, cfg.weight_values, ctx.as_deref_mut())?;
        x = z;
        layers.push(trace);
    }

    let pooled = tape.mean_rows(x, l_valid)?;
    let scores = tape.matmul(pooled, bound.cls_w)?;
    let logits = tape.add_row(scores, bound.cls_b)?;

    Ok(ForwardOut { logits, layers, bound })
}

/// Argmax of a `[1, n]` logit row.
pub fn predict_from_logits(logits: &Tensor) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in logits.data().iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}
