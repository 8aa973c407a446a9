//! Synthetic planted-cue dataset generation and batching.
//!
//! A sample is background noise with one or more contiguous cue segments
//! whose per-frame mean is a class signature vector. Cue length and position
//! vary per sample over a configurable range, so the label is recoverable
//! only from cue content and no single fixed attention window is optimal.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CoreError, Result};
use crate::rng::{self, stream};
use crate::tensor::Tensor;

/// One sequence sample.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// `[len, feature_dim]` features; rows at `valid..` (if any) are padding.
    pub features: Tensor,
    /// Unpadded length.
    pub valid: usize,
    pub label: usize,
    /// Per-frame cue indicator for synthetic data (1 = cue frame).
    pub cue_mask: Option<Vec<u8>>,
}

/// Synthetic dataset description.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SyntheticSpec {
    pub classes: usize,
    pub feature_dim: usize,
    pub len_min: usize,
    pub len_max: usize,
    /// Cue length range as fractions of the sample length.
    pub cue_min_fraction: f64,
    pub cue_max_fraction: f64,
    pub cues_per_sample: usize,
    pub noise_scale: f64,
    /// Per-dimension amplitude of the class signature vectors.
    pub separation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 4,
            feature_dim: 32,
            len_min: 64,
            len_max: 128,
            cue_min_fraction: 0.05,
            cue_max_fraction: 0.30,
            cues_per_sample: 1,
            noise_scale: 1.0,
            separation: 0.5,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(CoreError::InvalidConfig("classes must be >= 2".into()));
        }
        if self.feature_dim == 0 {
            return Err(CoreError::InvalidConfig("feature_dim must be >= 1".into()));
        }
        if self.len_min < 8 || self.len_min > self.len_max {
            return Err(CoreError::InvalidConfig(format!(
                "length range [{}, {}] invalid (need 8 <= min <= max)",
                self.len_min, self.len_max
            )));
        }
        if !(self.cue_min_fraction > 0.0
            && self.cue_min_fraction <= self.cue_max_fraction
            && self.cue_max_fraction < 1.0)
        {
            return Err(CoreError::InvalidConfig(format!(
                "cue fractions ({}, {}) must satisfy 0 < min <= max < 1",
                self.cue_min_fraction, self.cue_max_fraction
            )));
        }
        if self.cues_per_sample == 0 {
            return Err(CoreError::InvalidConfig("cues_per_sample must be >= 1".into()));
        }
        if self.noise_scale < 0.0 || self.separation < 0.0 {
            return Err(CoreError::InvalidConfig("noise_scale and separation must be >= 0".into()));
        }
        Ok(())
    }
}

/// Class signature vectors: deterministic Rademacher patterns scaled by the
/// separation amplitude.
pub fn class_signatures(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut rng = rng::chacha(spec.seed, &[stream::DATA, u64::MAX]);
    (0..spec.classes)
        .map(|_| {
            (0..spec.feature_dim)
                .map(|_| if rng.random::<bool>() { spec.separation } else { -spec.separation })
                .collect()
        })
        .collect()
}

/// Generate `count` samples starting at sample index `start`. Indices fully
/// determine content, so disjoint ranges give disjoint deterministic sets
/// (train `[0, n)`, test `[n, n + m)`).
pub fn generate_range(spec: &SyntheticSpec, start: usize, count: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    let signatures = class_signatures(spec);
    let mut out = Vec::with_capacity(count);
    for idx in start..start + count {
        let mut rng = rng::chacha(spec.seed, &[stream::DATA, idx as u64]);
        let label = idx % spec.classes;
        let len = rng.random_range(spec.len_min..=spec.len_max);

        let mut mask = vec![0u8; len];
        for _ in 0..spec.cues_per_sample {
            let frac = rng.random_range(spec.cue_min_fraction..=spec.cue_max_fraction);
            let cue_len = ((frac * len as f64) as usize).clamp(1, len);
            let cue_start = rng.random_range(0..=len - cue_len);
            for m in mask[cue_start..cue_start + cue_len].iter_mut() {
                *m = 1;
            }
        }

        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut features = Tensor::zeros(len, spec.feature_dim);
        for t in 0..len {
            let sig = if mask[t] == 1 { Some(&signatures[label]) } else { None };
            let row = features.row_mut(t);
            for (d, item) in row.iter_mut().enumerate() {
                let noise: f64 = normal.sample(&mut rng);
                *item = spec.noise_scale * noise + sig.map_or(0.0, |s| s[d]);
            }
        }

        out.push(Sample {
            id: format!("syn-{idx:06}"),
            features,
            valid: len,
            label,
            cue_mask: Some(mask),
        });
    }
    Ok(out)
}

/// Generate the first `count` samples.
pub fn generate(spec: &SyntheticSpec, count: usize) -> Result<Vec<Sample>> {
    generate_range(spec, 0, count)
}

/// One padded batch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Indices into the source sample slice, in batch order.
    pub indices: Vec<usize>,
    /// Per-sample features padded with zero rows to the batch maximum.
    pub features: Vec<Tensor>,
    pub valid: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Deterministically shuffled padded batches. Padding inside a batch goes to
/// the maximum valid length within that batch; features in `[0, valid)` are
/// never altered.
pub fn batches(samples: &[Sample], batch_size: usize, shuffle_seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(CoreError::Contract("batch_size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = rng::chacha(shuffle_seed, &[stream::SHUFFLE]);
    // Fisher-Yates.
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }

    let mut out = Vec::new();
    for chunk in order.chunks(batch_size) {
        let max_len = chunk.iter().map(|&i| samples[i].valid).max().unwrap_or(0);
        let mut features = Vec::with_capacity(chunk.len());
        let mut valid = Vec::with_capacity(chunk.len());
        let mut labels = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let s = &samples[i];
            let mut padded = Tensor::zeros(max_len, s.features.cols());
            for r in 0..s.valid {
                padded.row_mut(r).copy_from_slice(s.features.row(r));
            }
            features.push(padded);
            valid.push(s.valid);
            labels.push(s.label);
        }
        out.push(Batch { indices: chunk.to_vec(), features, valid, labels });
    }
    Ok(out)
}

/// A record in a dataset manifest (one JSON object per line in the file
/// format; parsing and IO live in the companion crate).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ManifestRecord {
    pub id: String,
    pub label: usize,
    pub length: usize,
    pub dim: usize,
    pub path: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let spec = SyntheticSpec::default();
        let a = generate(&spec, 16).unwrap();
        let b = generate(&spec, 16).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.features, y.features);
            assert_eq!(x.label, y.label);
        }
        let mut counts = [0usize; 4];
        for s in &a {
            counts[s.label] += 1;
        }
        assert_eq!(counts, [4, 4, 4, 4]);
    }

    #[test]
    fn cue_segments_are_contiguous_and_in_range() {
        let spec = SyntheticSpec::default();
        for s in generate(&spec, 32).unwrap() {
            let mask = s.cue_mask.as_ref().unwrap();
            assert_eq!(mask.len(), s.valid);
            let cue_len = mask.iter().filter(|&&m| m == 1).count();
            assert!(cue_len >= 1);
            // single cue: the 1-run must be contiguous
            let first = mask.iter().position(|&m| m == 1).unwrap();
            let last = mask.iter().rposition(|&m| m == 1).unwrap();
            assert_eq!(last - first + 1, cue_len, "cue not contiguous in {}", s.id);
            let frac = cue_len as f64 / s.valid as f64;
            assert!(frac <= 0.35, "cue fraction {frac} too large");
        }
    }

    #[test]
    fn batches_pad_and_shuffle_deterministically() {
        let spec = SyntheticSpec { len_min: 8, len_max: 16, ..SyntheticSpec::default() };
        let samples = generate(&spec, 10).unwrap();
        let a = batches(&samples, 32, 3).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].len(), 10);
        let b = batches(&samples, 32, 3).unwrap();
        assert_eq!(a[0].indices, b[0].indices);
        let c = batches(&samples, 32, 4).unwrap();
        assert_ne!(a[0].indices, c[0].indices);

        // Padding preserves the valid prefix.
        for (bi, &si) in a[0].indices.iter().enumerate() {
            let orig = &samples[si];
            let padded = &a[0].features[bi];
            for r in 0..orig.valid {
                assert_eq!(padded.row(r), orig.features.row(r));
            }
            for r in orig.valid..padded.rows() {
                assert!(padded.row(r).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn equal_lengths_mean_no_padding() {
        let spec = SyntheticSpec { len_min: 12, len_max: 12, ..SyntheticSpec::default() };
        let samples = generate(&spec, 6).unwrap();
        let bs = batches(&samples, 3, 0).unwrap();
        for b in bs {
            for (bi, &si) in b.indices.iter().enumerate() {
                assert_eq!(b.features[bi], samples[si].features);
            }
        }
    }
}
