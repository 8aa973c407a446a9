//! Quick throughput probe: one epoch at the acceptance-scale config.

use dst_core::attention::AttentionVariant;
use dst_core::data::{self, SyntheticSpec};
use dst_core::model::{DstModel, ModelConfig};
use dst_core::trainer::{self, Sequential, TrainConfig};
use std::time::Instant;

fn main() {
    let variant = match std::env::args().nth(1).as_deref() {
        Some("window") => AttentionVariant::FixedWindow { window_fraction: 0.1 },
        Some("dcn") => AttentionVariant::DcnLike { point_fraction: 0.1 },
        _ => AttentionVariant::Deformable,
    };
    let spec = SyntheticSpec::default();
    let n: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(200);
    let samples = data::generate(&spec, n).unwrap();
    let config = ModelConfig {
        feature_dim: 32,
        d_model: 64,
        heads: 8,
        blocks: 4,
        ffn_multiplier: 4,
        classes: 4,
        variant,
        dropout: 0.1,
        max_len: 326,
        positional: false,
        weight_values: false,
    };
    let model = DstModel::init(&config, 0).unwrap();
    let train_config = TrainConfig {
        epochs: 1,
        lr: 5e-4,
        batch_size: 32,
        val_fraction: 0.0,
        seed: 0,
        ..Default::default()
    };
    let t = Instant::now();
    let result = trainer::train(model, &samples, &train_config, &Sequential, |_| {}).unwrap();
    let dt = t.elapsed().as_secs_f64();
    println!(
        "variant={:?} samples={} epoch_time={:.2}s per_sample={:.2}ms loss={:.4}",
        config.variant.kind_name(),
        n,
        dt,
        dt / n as f64 * 1e3,
        result.final_train_loss
    );
}
