// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training loop: per-sample gradient accumulation, AdamW, per-epoch
//! cosine warm restarts and early stopping on a validation metric.

pub mod metrics;
pub mod optim;
pub mod schedule;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use metrics::{accuracy, auroc, f1, f1_from_counts, Metrics};
pub use optim::{adamw_step, adamw_update, AdamWConfig, OptimizerState};
pub use schedule::{cosine_warm_restart_lr, SchedulerConfig};

use crate::dataio::{Dataset, GraphRecord, Split};
use crate::detector::{
    forward_full, predict, Ablation, DetectorConfig, DetectorError, DetectorParams, DropoutMasks, ForwardSpec,
    Prediction, RegMode,
};
use crate::engine::{Gradients, Tensor};
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("non-finite gradient for parameter {param}")]
    NonFinite { param: String },
    #[error("no gradient of matching shape for parameter {0}")]
    MissingGradient(String),
    #[error("{0} split is empty")]
    EmptySplit(Split),
    #[error("record {id} in the {split} split has no fact/hallucination label")]
    UnknownLabel { id: String, split: Split },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

/// Validation metric that drives early stopping and model selection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Monitor {
    #[default]
    Auroc,
    F1,
}

impl Monitor {
    pub fn value(self, m: &Metrics) -> f64 {
        match self {
            Monitor::Auroc => m.auroc,
            Monitor::F1 => m.f1,
        }
    }
}

impl fmt::Display for Monitor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Monitor::Auroc => "auroc",
            Monitor::F1 => "f1",
        })
    }
}

impl FromStr for Monitor {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "auroc" => Ok(Monitor::Auroc),
            "f1" => Ok(Monitor::F1),
            other => Err(format!("unrecognized monitor {other:?}; expected auroc or f1")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub lambda: f64,
    pub scheduler: SchedulerConfig,
    pub adamw: AdamWConfig,
    /// Master seed for initialization, shuffling and dropout.
    pub seed: u64,
    pub reg_mode: RegMode,
    pub ablation: Ablation,
    pub monitor: Monitor,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            epochs: 50,
            batch_size: 8,
            patience: 20,
            lambda: 0.02,
            scheduler: SchedulerConfig::default(),
            adamw: AdamWConfig::default(),
            seed: 0,
            reg_mode: RegMode::SecondOrder,
            ablation: Ablation::None,
            monitor: Monitor::Auroc,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.scheduler.eta_min >= 0.0 && self.lr0 > self.scheduler.eta_min) {
            return bad(format!("need lr0 > eta_min >= 0 (lr0 {}, eta_min {})", self.lr0, self.scheduler.eta_min));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.scheduler.t_mult == 0 || self.scheduler.t0 == 0 {
            return bad("T0 and Tmult must be at least 1".into());
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative".into());
        }
        Ok(())
    }

    /// The detector configuration actually trained: `base` with this
    /// config's seed, lambda, regularizer mode, ablation and input width.
    pub fn detector_config(&self, base: &DetectorConfig, input_dim: usize) -> DetectorConfig {
        DetectorConfig {
            input_dim,
            lambda: self.lambda,
            reg_mode: self.reg_mode,
            ablation: self.ablation,
            seed: self.seed,
            ..base.clone()
        }
    }
}

/// Metrics of one split after one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub auroc: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    /// Mean full loss over the epoch's training samples (with dropout).
    pub train_loss: f64,
    /// Metrics of the dropout-perturbed training predictions.
    pub train: Metrics,
    pub val: Metrics,
}

impl EpochSummary {
    pub fn records(&self) -> [EpochRecord; 2] {
        let rec = |split, m: &Metrics| EpochRecord {
            epoch: self.epoch,
            split,
            auroc: m.auroc,
            f1: m.f1,
            accuracy: m.accuracy,
            lr: self.lr,
        };
        [rec(Split::Train, &self.train), rec(Split::Val, &self.val)]
    }
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation monitor value.
    pub params: DetectorParams,
    pub history: Vec<EpochSummary>,
    pub best_epoch: usize,
    pub best_monitor: f64,
}

impl TrainOutcome {
    /// JSON lines `{epoch, split, auroc, f1, accuracy, lr}`, train then val per epoch.
    pub fn metrics_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.history {
            for r in e.records() {
                out.push_str(&serde_json::to_string(&r).expect("plain struct serializes"));
                out.push('\n');
            }
        }
        out
    }
}

fn labelled<'a>(dataset: &'a Dataset, split: Split) -> Result<Vec<&'a GraphRecord>, TrainError> {
    let records = dataset.split(split);
    if records.is_empty() {
        return Err(TrainError::EmptySplit(split));
    }
    if let Some(r) = records.iter().find(|r| r.label.class().is_none()) {
        return Err(TrainError::UnknownLabel {
            id: r.sample_id.clone(),
            split,
        });
    }
    Ok(records)
}

fn class_bytes(records: &[&GraphRecord]) -> Vec<u8> {
    records
        .iter()
        .map(|r| r.label.class().map_or(0, |c| c as u8))
        .collect()
}

/// Predictions for `records`, in order (computed in parallel).
pub fn predict_all(params: &DetectorParams, records: &[&GraphRecord]) -> Result<Vec<Prediction>, TrainError> {
    records
        .par_iter()
        .map(|r| predict(r, params).map_err(TrainError::from))
        .collect()
}

/// Metrics of `params` on labelled records.
pub fn evaluate_records(params: &DetectorParams, records: &[&GraphRecord]) -> Result<Metrics, TrainError> {
    let preds = predict_all(params, records)?;
    let p: Vec<f64> = preds.iter().map(|p| p.p_hallucination).collect();
    Metrics::from_scores(&p, &class_bytes(records))
}

/// Inference over one split; AUROC on `p_hallucination`, F1 and accuracy at 0.5.
pub fn evaluate(params: &DetectorParams, dataset: &Dataset, split: Split) -> Result<Metrics, TrainError> {
    let records = labelled(dataset, split)?;
    evaluate_records(params, &records)
}

struct SampleResult {
    grads: Gradients,
    loss: f64,
    p_hallucination: f64,
}

fn sample_gradient(
    record: &GraphRecord,
    params: &DetectorParams,
    dropout_seed: u64,
) -> Result<SampleResult, TrainError> {
    let masks = (params.config.dropout_p > 0.0).then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        DropoutMasks::sample(&params.config, record.len(), &mut rng)
    });
    let mut out = forward_full(record, params, ForwardSpec::train(masks.as_ref()))?;
    let grads = out.gradients()?;
    Ok(SampleResult {
        grads,
        loss: out.loss.unwrap_or(f64::NAN),
        p_hallucination: Prediction::from_logits(&out.logits).p_hallucination,
    })
}

/// Averages per-sample gradients over the batch, summing in batch order.
fn average_gradients(params: &DetectorParams, results: &[SampleResult]) -> Gradients {
    let n = results.len() as f64;
    params
        .named()
        .into_iter()
        .map(|(name, t)| {
            let mut acc = Tensor::zeros(t.rows(), t.cols());
            for r in results {
                if let Some(g) = r.grads.get(&name) {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
            (name, acc.scale(1.0 / n))
        })
        .collect()
}

/// Trains from a fresh initialization of `train_cfg.detector_config(base, d)`.
pub fn train(dataset: &Dataset, base: &DetectorConfig, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let train_set = labelled(dataset, Split::Train)?;
    let val_set = labelled(dataset, Split::Val)?;
    let detector = cfg.detector_config(base, train_set[0].dim());
    detector.validate().map_err(DetectorError::Config)?;
    let mut params = DetectorParams::init(&detector);
    let mut state = OptimizerState::default();

    let mut best: Option<(f64, usize, DetectorParams)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut since_best = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = cosine_warm_restart_lr(epoch, cfg.lr0, &cfg.scheduler);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle", epoch as u64)));
        let epoch_dropout = derive_seed(cfg.seed, "dropout", epoch as u64);

        let mut losses = Vec::with_capacity(order.len());
        let mut scores = vec![0.0; order.len()];
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<SampleResult> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &idx)| {
                    let position = (b * cfg.batch_size + k) as u64;
                    sample_gradient(train_set[idx], &params, derive_seed(epoch_dropout, "sample", position))
                })
                .collect::<Result<_, _>>()?;
            for (r, &idx) in results.iter().zip(batch) {
                losses.push(r.loss);
                scores[idx] = r.p_hallucination;
            }
            let grads = average_gradients(&params, &results);
            adamw_step(&mut params, &grads, &mut state, lr, &cfg.adamw)?;
        }

        let train_metrics = Metrics::from_scores(&scores, &class_bytes(&train_set))?;
        let val_metrics = evaluate_records(&params, &val_set)?;
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let monitor = cfg.monitor.value(&val_metrics);
        log::info!(
            "epoch {epoch:>3} lr {lr:.3e} loss {train_loss:.5} val auroc {:.4} f1 {:.4}",
            val_metrics.auroc,
            val_metrics.f1
        );
        history.push(EpochSummary {
            epoch,
            lr,
            train_loss,
            train: train_metrics,
            val: val_metrics,
        });
        if best.as_ref().is_none_or(|(v, _, _)| monitor > *v) {
            best = Some((monitor, epoch, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log::info!("early stop after epoch {epoch}: no improvement for {} epochs", cfg.patience);
                break;
            }
        }
    }

    let (best_monitor, best_epoch, params) = match best {
        Some(b) => b,
        None => (f64::NAN, 0, params),
    };
    Ok(TrainOutcome {
        params,
        history,
        best_epoch,
        best_monitor,
    })
}
