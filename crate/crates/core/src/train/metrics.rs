// SPDX-License-Identifier: MIT OR Apache-2.0

//! Detection metrics. Hallucination (label 1) is the positive class.

use serde::{Deserialize, Serialize};

use super::TrainError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auroc: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub n: usize,
}

fn check_len(a: usize, b: usize) -> Result<(), TrainError> {
    if a != b {
        return Err(TrainError::LengthMismatch { scores: a, labels: b });
    }
    Ok(())
}

/// Area under the ROC curve as the Mann–Whitney statistic: the fraction of
/// (positive, negative) pairs where the positive scores higher, ties
/// counting one half. Returns 0.5 when either class is absent.
///
/// Computed from midranks in `O(n log n)`.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64, TrainError> {
    check_len(scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(0.5);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                pos_rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// F1 with hallucination as the positive class; 0 when precision + recall = 0.
pub fn f1(predicted: &[u8], labels: &[u8]) -> Result<f64, TrainError> {
    check_len(predicted.len(), labels.len())?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &y) in predicted.iter().zip(labels) {
        match (p, y) {
            (1, 1) => tp += 1,
            (1, _) => fp += 1,
            (_, 1) => fn_ += 1,
            _ => {}
        }
    }
    Ok(f1_from_counts(tp, fp, fn_))
}

/// `2 tp / (2 tp + fp + fn)`: the harmonic mean of precision and recall,
/// evaluated with a single rounding; 0 when there are no true positives.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        0.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
    }
}

pub fn accuracy(predicted: &[u8], labels: &[u8]) -> Result<f64, TrainError> {
    check_len(predicted.len(), labels.len())?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

impl Metrics {
    /// Metrics from hallucination probabilities, thresholding at 0.5.
    pub fn from_scores(p_hallucination: &[f64], labels: &[u8]) -> Result<Self, TrainError> {
        let predicted: Vec<u8> = p_hallucination.iter().map(|&p| u8::from(p >= 0.5)).collect();
        Ok(Self {
            auroc: auroc(p_hallucination, labels)?,
            f1: f1(&predicted, labels)?,
            accuracy: accuracy(&predicted, labels)?,
            n: labels.len(),
        })
    }
}
