//! Evaluation metrics: weighted accuracy (overall fraction correct),
//! unweighted accuracy (macro recall), support-weighted F1, confusion
//! matrix, and activated-token percentage (PAT) aggregation.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};

fn check_inputs(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.is_empty() || labels.is_empty() {
        return Err(CoreError::Contract("metrics need at least one sample"));
    }
    if preds.len() != labels.len() {
        return Err(CoreError::ShapeMismatch {
            op: "metrics",
            lhs: vec![preds.len()],
            rhs: vec![labels.len()],
        });
    }
    Ok(())
}

/// Overall fraction of correct predictions.
pub fn weighted_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_inputs(preds, labels)?;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Mean of per-class recalls over the classes present in `labels`.
pub fn unweighted_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_inputs(preds, labels)?;
    let classes = labels.iter().chain(preds).max().unwrap() + 1;
    let mut support = vec![0usize; classes];
    let mut hits = vec![0usize; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        support[l] += 1;
        if p == l {
            hits[l] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0;
    for c in 0..classes {
        if support[c] > 0 {
            sum += hits[c] as f64 / support[c] as f64;
            present += 1;
        }
    }
    Ok(sum / present as f64)
}

/// Per-class precision/recall/F1 and support.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Confusion matrix with `confusion[true][pred]` counts.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    check_inputs(preds, labels)?;
    let mut m = vec![vec![0usize; classes]; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if l >= classes {
            return Err(CoreError::IndexOutOfRange { what: "label", index: l, bound: classes });
        }
        if p >= classes {
            return Err(CoreError::IndexOutOfRange { what: "prediction", index: p, bound: classes });
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Per-class metrics from a confusion matrix. Zero denominators resolve
/// to 0.
pub fn per_class_metrics(confusion: &[Vec<usize>]) -> Vec<ClassMetrics> {
    let classes = confusion.len();
    let mut out = Vec::with_capacity(classes);
    for c in 0..classes {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = (0..classes).map(|r| confusion[r][c]).sum();
        let precision = if predicted > 0 { tp as f64 / predicted as f64 } else { 0.0 };
        let recall = if support > 0 { tp as f64 / support as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        out.push(ClassMetrics { precision, recall, f1, support });
    }
    out
}

/// Support-weighted mean of per-class F1 scores.
pub fn weighted_f1(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_inputs(preds, labels)?;
    let classes = labels.iter().chain(preds).max().unwrap() + 1;
    let confusion = confusion_matrix(preds, labels, classes)?;
    let per_class = per_class_metrics(&confusion);
    let total: usize = per_class.iter().map(|c| c.support).sum();
    let weighted: f64 = per_class.iter().map(|c| c.f1 * c.support as f64).sum();
    Ok(weighted / total as f64)
}

/// Running PAT aggregation over (layer, head) cells.
#[derive(Debug, Clone)]
pub struct PatAccumulator {
    layers: usize,
    heads: usize,
    /// Sum of span/valid ratios per (layer, head).
    sums: Vec<f64>,
    counts: Vec<usize>,
}

impl PatAccumulator {
    pub fn new(layers: usize, heads: usize) -> Self {
        PatAccumulator {
            layers,
            heads,
            sums: vec![0.0; layers * heads],
            counts: vec![0; layers * heads],
        }
    }

    pub fn add(&mut self, layer: usize, head: usize, activated: usize, l_valid: usize) {
        let cell = layer * self.heads + head;
        self.sums[cell] += activated as f64 / l_valid as f64;
        self.counts[cell] += 1;
    }

    /// Merge another accumulator (same dimensions) into this one.
    pub fn merge(&mut self, other: &PatAccumulator) {
        debug_assert!(self.layers == other.layers && self.heads == other.heads);
        for (s, o) in self.sums.iter_mut().zip(&other.sums) {
            *s += o;
        }
        for (c, o) in self.counts.iter_mut().zip(&other.counts) {
            *c += o;
        }
    }

    pub fn is_empty(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }

    /// Joint mean percentage over every (layer, head, query) cell.
    pub fn overall(&self) -> f64 {
        let total: f64 = self.sums.iter().sum();
        let count: usize = self.counts.iter().sum();
        total / count as f64 * 100.0
    }

    pub fn per_layer(&self) -> Vec<f64> {
        (0..self.layers)
            .map(|l| {
                let s: f64 = self.sums[l * self.heads..(l + 1) * self.heads].iter().sum();
                let c: usize = self.counts[l * self.heads..(l + 1) * self.heads].iter().sum();
                s / c as f64 * 100.0
            })
            .collect()
    }

    pub fn per_head(&self) -> Vec<Vec<f64>> {
        (0..self.layers)
            .map(|l| {
                (0..self.heads)
                    .map(|h| {
                        let cell = l * self.heads + h;
                        self.sums[cell] / self.counts[cell] as f64 * 100.0
                    })
                    .collect()
            })
            .collect()
    }
}

/// Full evaluation report.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub samples: usize,
    pub wa: f64,
    pub ua: f64,
    pub wf1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: Vec<Vec<usize>>,
    /// Joint PAT over every (layer, head, query); None when the mechanism
    /// reports no activation counts.
    pub pat: Option<f64>,
    pub pat_per_layer: Vec<f64>,
    pub pat_per_head: Vec<Vec<f64>>,
}

/// Assemble every metric into a report.
pub fn build_report(
    preds: &[usize],
    labels: &[usize],
    classes: usize,
    pat: Option<&PatAccumulator>,
) -> Result<EvalReport> {
    check_inputs(preds, labels)?;
    let confusion = confusion_matrix(preds, labels, classes)?;
    let per_class = per_class_metrics(&confusion);
    let (pat_overall, pat_per_layer, pat_per_head) = match pat {
        Some(acc) if !acc.is_empty() => {
            (Some(acc.overall()), acc.per_layer(), acc.per_head())
        }
        _ => (None, Vec::new(), Vec::new()),
    };
    Ok(EvalReport {
        samples: labels.len(),
        wa: weighted_accuracy(preds, labels)?,
        ua: unweighted_accuracy(preds, labels)?,
        wf1: weighted_f1(preds, labels)?,
        per_class,
        confusion,
        pat: pat_overall,
        pat_per_layer,
        pat_per_head,
    })
}
