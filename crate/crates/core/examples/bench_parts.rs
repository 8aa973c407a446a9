//! Component timing: forward vs backward, dropout on/off, per-op costs.

use dst_core::attention::AttentionVariant;
use dst_core::data::{self, SyntheticSpec};
use dst_core::model::{DstModel, ModelConfig};
use dst_core::trainer;
use std::time::Instant;

fn main() {
    let spec = SyntheticSpec::default();
    let samples = data::generate(&spec, 64).unwrap();
    for (name, variant, dropout) in [
        ("deformable drop=0.1", AttentionVariant::Deformable, 0.1),
        ("deformable drop=0", AttentionVariant::Deformable, 0.0),
        ("window drop=0", AttentionVariant::FixedWindow { window_fraction: 0.1 }, 0.0),
        ("full drop=0", AttentionVariant::Full, 0.0),
    ] {
        let config = ModelConfig {
            feature_dim: 32, d_model: 64, heads: 8, blocks: 4, ffn_multiplier: 4,
            classes: 4, variant, dropout, max_len: 326, positional: false, weight_values: false,
        };
        let model = DstModel::init(&config, 0).unwrap();
        // forward only
        let t = Instant::now();
        for s in &samples {
            let _ = trainer::run_sample(&model, &s.features, s.valid, s.label, None, false).unwrap();
        }
        let fwd = t.elapsed().as_secs_f64() / samples.len() as f64 * 1e3;
        // forward + backward (+dropout when configured)
        let t = Instant::now();
        for (i, s) in samples.iter().enumerate() {
            let _ = trainer::run_sample(&model, &s.features, s.valid, s.label, Some((0, &[0, i as u64])), true).unwrap();
        }
        let full = t.elapsed().as_secs_f64() / samples.len() as f64 * 1e3;
        println!("{name:22} forward {fwd:6.2}ms  fwd+bwd {full:6.2}ms");
    }
}
