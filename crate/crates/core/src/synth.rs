// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic graph datasets with planted factual structure and planted
//! spurious edges, for validating the refinement mechanism without an LLM.
//!
//! Each record is a "question" prefix of `ceil(L/2)` tokens followed by
//! "answer" tokens. Question tokens carry a per-record context vector plus
//! Gaussian noise. Answer token `i` carries the attention-weighted mean of
//! its predecessors plus `signal_strength * u_class` plus noise, where
//! `u_fact` and `u_hall` are fixed orthonormal directions drawn from the
//! seed. Attention rows are softmaxes over planted logits; hallucinated
//! records get `n_spurious` extra logit boosts from random answer tokens to
//! random question tokens.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{Dataset, GraphRecord, Label, RecordMeta, Split};
use crate::engine::Tensor;
use crate::seed::derive_seed;
use crate::train::metrics::auroc;

pub const MODEL_ID: &str = "synthetic";
pub const LAYER_INDEX: u32 = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_samples: usize,
    /// Inclusive `[min, max]` token counts.
    pub l_range: [usize; 2],
    pub d: usize,
    pub signal_strength: f64,
    pub n_spurious: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Pre-softmax logit boost on each planted spurious edge.
    pub spurious_boost: f64,
    /// Scale of the per-record context vector shared by question tokens.
    pub context_scale: f64,
    /// Standard deviation of the random base attention logits.
    pub logit_std: f64,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            l_range: [8, 14],
            d: 16,
            signal_strength: 1.5,
            n_spurious: 2,
            noise_sigma: 1.0,
            seed: 42,
            spurious_boost: 0.5,
            context_scale: 1.0,
            logit_std: 1.0,
            train_frac: 0.4,
            val_frac: 0.2,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("dataset carries no generating config")]
    Untagged,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        let [lo, hi] = self.l_range;
        if self.n_samples == 0 {
            return bad("n_samples must be positive");
        }
        if lo < 2 || hi < lo {
            return bad("l_range must satisfy 2 <= min <= max");
        }
        if self.n_spurious >= lo {
            return bad("n_spurious must be below l_range min");
        }
        if self.d < 2 {
            return bad("d must be at least 2 (two orthogonal class directions)");
        }
        if !(self.signal_strength >= 0.0 && self.noise_sigma >= 0.0 && self.context_scale >= 0.0 && self.logit_std >= 0.0) {
            return bad("signal_strength, noise_sigma, context_scale and logit_std must be non-negative");
        }
        if !(self.train_frac >= 0.0 && self.val_frac >= 0.0 && self.train_frac + self.val_frac <= 1.0) {
            return bad("split fractions must be non-negative and sum to at most 1");
        }
        Ok(())
    }
}

/// A generated record before `f32` quantization, with its planted structure.
#[derive(Clone, Debug)]
pub struct PlantedRecord {
    pub record: GraphRecord,
    /// Number of leading question tokens.
    pub question_len: usize,
    /// Planted `(i, j)` spurious edges, `i` an answer token, `j` a question token.
    pub spurious: Vec<(usize, usize)>,
}

/// The two orthonormal class directions `(u_fact, u_hall)`.
pub fn class_directions(config: &SynthConfig) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "synth-directions", 0));
    let d = config.d;
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..d).map(|_| StandardNormal.sample(rng)).collect() };
    let normalize = |v: &mut Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
    };
    let mut u = draw(&mut rng);
    normalize(&mut u);
    let mut w = draw(&mut rng);
    let dot: f64 = u.iter().zip(&w).map(|(a, b)| a * b).sum();
    w.iter_mut().zip(&u).for_each(|(x, a)| *x -= dot * a);
    normalize(&mut w);
    (u, w)
}

/// Generates record `index` of the dataset described by `config`.
pub fn plant_record(config: &SynthConfig, index: usize, directions: &(Vec<f64>, Vec<f64>)) -> PlantedRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "synth-record", index as u64));
    let [lo, hi] = config.l_range;
    let l = rng.random_range(lo..=hi);
    let d = config.d;
    let label = if index % 2 == 0 { Label::Fact } else { Label::Hallucination };
    let q = l.div_ceil(2);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let mut logits = Tensor::zeros(l, l);
    for i in 0..l {
        for j in 0..=i {
            logits.set(i, j, config.logit_std * normal(&mut rng));
        }
    }
    let clean = softmax_rows(&logits);
    let mut spurious = Vec::new();
    if label == Label::Hallucination {
        let mut candidates: Vec<(usize, usize)> = (q..l).flat_map(|i| (0..q).map(move |j| (i, j))).collect();
        candidates.shuffle(&mut rng);
        spurious = candidates.into_iter().take(config.n_spurious).collect();
        spurious.sort_unstable();
        for &(i, j) in &spurious {
            logits.set(i, j, logits.get(i, j) + config.spurious_boost);
        }
    }
    let attention = softmax_rows(&logits);

    let u = if label == Label::Fact { &directions.0 } else { &directions.1 };
    let context: Vec<f64> = (0..d).map(|_| config.context_scale * normal(&mut rng)).collect();
    let mut hidden = Tensor::zeros(l, d);
    for i in 0..l {
        let noise: Vec<f64> = (0..d).map(|_| config.noise_sigma * normal(&mut rng)).collect();
        for k in 0..d {
            let v = if i < q {
                context[k] + noise[k]
            } else {
                predecessor_mean(&hidden, &clean, i, k) + config.signal_strength * u[k] + noise[k]
            };
            hidden.set(i, k, v);
        }
    }

    PlantedRecord {
        record: GraphRecord {
            sample_id: format!("synth-{index:05}"),
            tokens: (0..l).map(|i| format!("t{i}")).collect(),
            hidden,
            attention,
            label,
            meta: RecordMeta {
                model_id: MODEL_ID.to_string(),
                layer_index: LAYER_INDEX,
            },
        },
        question_len: q,
        spurious,
    }
}

/// Row-wise causal softmax over the lower triangle of `logits`.
fn softmax_rows(logits: &Tensor) -> Tensor {
    let l = logits.rows();
    let mut out = Tensor::zeros(l, l);
    for i in 0..l {
        let m = (0..=i).map(|j| logits.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = (0..=i).map(|j| (logits.get(i, j) - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for (j, x) in e.iter().enumerate() {
            out.set(i, j, x / z);
        }
    }
    out
}

/// Attention-weighted mean of rows `0..i` of `hidden` in column `k`, with
/// weights renormalized over the strict predecessors.
fn predecessor_mean(hidden: &Tensor, attention: &Tensor, i: usize, k: usize) -> f64 {
    let z: f64 = (0..i).map(|j| attention.get(i, j)).sum();
    (0..i).map(|j| attention.get(i, j) * hidden.get(j, k)).sum::<f64>() / z
}

/// Generates a labelled dataset with a seeded train/val/test split. Tensors
/// are quantized to `f32`, so the in-memory dataset equals its saved form.
pub fn generate_dataset(config: &SynthConfig) -> Result<Dataset, SynthError> {
    config.validate()?;
    let dirs = class_directions(config);
    let records: Vec<GraphRecord> = (0..config.n_samples)
        .map(|k| {
            let mut r = plant_record(config, k, &dirs).record;
            r.quantize();
            r
        })
        .collect();

    let n = config.n_samples;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "synth-split", 0)));
    let n_train = (config.train_frac * n as f64).round() as usize;
    let n_val = ((config.val_frac * n as f64).round() as usize).min(n - n_train);
    let splits = order
        .iter()
        .enumerate()
        .map(|(pos, &k)| {
            let s = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (records[k].sample_id.clone(), s)
        })
        .collect();

    Ok(Dataset {
        records,
        splits,
        generator: Some(config.clone()),
        count_mismatches: Vec::new(),
    })
}

/// Log-likelihood-ratio score of the planted feature model for one record:
/// answer-token residuals `h_i - mean_{j<i} h_j` projected on `u_hall - u_fact`.
pub fn likelihood_ratio_score(record: &GraphRecord, directions: &(Vec<f64>, Vec<f64>)) -> f64 {
    let l = record.len();
    let q = l.div_ceil(2);
    let d = record.dim();
    let mut score = 0.0;
    for i in q..l {
        for k in 0..d {
            let residual = record.hidden.get(i, k) - predecessor_mean(&record.hidden, &record.attention, i, k);
            score += residual * (directions.1[k] - directions.0[k]);
        }
    }
    score
}

/// AUROC of the closed-form likelihood-ratio score over every labelled
/// record; the ceiling a learned detector can approach on this data.
pub fn bayes_separability(dataset: &Dataset) -> Result<f64, SynthError> {
    let config = dataset.generator.as_ref().ok_or(SynthError::Untagged)?;
    let dirs = class_directions(config);
    let (scores, labels): (Vec<f64>, Vec<u8>) = dataset
        .records
        .iter()
        .filter_map(|r| r.label.class().map(|c| (likelihood_ratio_score(r, &dirs), c as u8)))
        .unzip();
    Ok(auroc(&scores, &labels).expect("equal lengths by construction"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{encode_record, validate};

    fn small(n: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            n_samples: n,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let a = generate_dataset(&small(4, 7)).unwrap();
        let b = generate_dataset(&small(4, 7)).unwrap();
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(encode_record(x).unwrap(), encode_record(y).unwrap());
        }
        assert_eq!(a.splits, b.splits);
    }

    #[test]
    fn classes_are_balanced() {
        let ds = generate_dataset(&small(1000, 1)).unwrap();
        let halluc = ds.records.iter().filter(|r| r.label == Label::Hallucination).count();
        assert_eq!(halluc, 500);
        let odd = generate_dataset(&small(5, 1)).unwrap();
        assert_eq!(odd.records.iter().filter(|r| r.label == Label::Fact).count(), 3);
    }

    #[test]
    fn default_split_is_400_200_400() {
        let ds = generate_dataset(&small(1000, 42)).unwrap();
        let c = ds.counts();
        assert_eq!((c[&Split::Train], c[&Split::Val], c[&Split::Test]), (400, 200, 400));
    }

    #[test]
    fn every_generated_record_validates() {
        let ds = generate_dataset(&small(300, 3)).unwrap();
        for r in &ds.records {
            assert!(validate(r).is_empty(), "{}: {:?}", r.sample_id, validate(r));
        }
    }

    #[test]
    fn attention_rows_are_exact_softmax() {
        let cfg = small(50, 9);
        let dirs = class_directions(&cfg);
        for k in 0..cfg.n_samples {
            let p = plant_record(&cfg, k, &dirs);
            for i in 0..p.record.len() {
                let s: f64 = p.record.attention.row_slice(i).iter().sum();
                assert!((s - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn spurious_edges_only_in_hallucinated_records() {
        let cfg = small(40, 5);
        let dirs = class_directions(&cfg);
        for k in 0..cfg.n_samples {
            let p = plant_record(&cfg, k, &dirs);
            match p.record.label {
                Label::Fact => assert!(p.spurious.is_empty()),
                _ => {
                    assert_eq!(p.spurious.len(), cfg.n_spurious);
                    for &(i, j) in &p.spurious {
                        assert!(i >= p.question_len && j < p.question_len);
                    }
                }
            }
        }
    }

    #[test]
    fn class_directions_are_orthonormal() {
        let (u, w) = class_directions(&SynthConfig::default());
        let dot: f64 = u.iter().zip(&w).map(|(a, b)| a * b).sum();
        let nu: f64 = u.iter().map(|x| x * x).sum();
        let nw: f64 = w.iter().map(|x| x * x).sum();
        assert!(dot.abs() < 1e-12 && (nu - 1.0).abs() < 1e-12 && (nw - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_signal_gives_chance_separability() {
        let cfg = SynthConfig {
            signal_strength: 0.0,
            ..small(1000, 11)
        };
        let v = bayes_separability(&generate_dataset(&cfg).unwrap()).unwrap();
        assert!((v - 0.5).abs() <= 0.05, "{v}");
    }

    #[test]
    fn strong_signal_is_nearly_separable() {
        let cfg = SynthConfig {
            signal_strength: 10.0,
            noise_sigma: 0.1,
            ..small(400, 12)
        };
        let v = bayes_separability(&generate_dataset(&cfg).unwrap()).unwrap();
        assert!(v > 0.99, "{v}");
    }

    #[test]
    fn single_sample_is_half() {
        let v = bayes_separability(&generate_dataset(&small(1, 2)).unwrap()).unwrap();
        assert_eq!(v, 0.5);
    }

    #[test]
    fn untagged_dataset_is_rejected() {
        assert_eq!(bayes_separability(&Dataset::default()), Err(SynthError::Untagged));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let c = SynthConfig {
            l_range: [2, 5],
            n_spurious: 2,
            ..SynthConfig::default()
        };
        assert!(c.validate().is_err());
        let c = SynthConfig {
            l_range: [1, 5],
            n_spurious: 0,
            ..SynthConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
