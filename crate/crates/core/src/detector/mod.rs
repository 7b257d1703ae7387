// SPDX-License-Identifier: MIT OR Apache-2.0

//! The gradient-guided graph detector: projection, gated message passing
//! over the refined causal graph, max/mean pooling and a two-way classifier.

pub mod checkpoint;
mod config;
pub mod network;
mod params;

use std::sync::Arc;

use thiserror::Error;

pub use config::{Ablation, DetectorConfig, RegMode, SensitivityTarget};
pub use network::{forward_full, DropoutMasks, ForwardOutput, ForwardSpec};
pub use params::{DetectorParams, GatLayerParams};
pub(crate) use params::glorot;

use crate::dataio::{GraphRecord, Label};
use crate::engine::{EngineError, Tape, Tensor};
use crate::refine::RefinedAdjacency;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("record {0:?} has no fact/hallucination label")]
    UnknownLabel(String),
    #[error("record hidden width {found} does not match detector input width {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("layer maps width {input} to {output} but has no shortcut projection")]
    MissingShortcut { input: usize, output: usize },
    #[error("forward pass was evaluated without a loss")]
    NoLoss,
    #[error("invalid detector configuration: {0}")]
    Config(String),
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: String, detail: String },
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Detector output for one record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    /// Softmax probability of the hallucination class.
    pub p_hallucination: f64,
    /// Hallucination iff `p_hallucination >= 0.5`, i.e. iff the
    /// hallucination logit is at least the fact logit.
    pub label: Label,
}

impl Prediction {
    pub fn from_logits(logits: &Tensor) -> Self {
        let (z0, z1) = (logits.get(0, 0), logits.get(0, 1));
        Self {
            p_hallucination: 1.0 / (1.0 + (z0 - z1).exp()),
            label: Label::from_class(network::predicted_class(logits)),
        }
    }
}

/// `relu(H W_p + b_p)` without dropout.
pub fn project(hidden: &Tensor, params: &DetectorParams) -> Result<Tensor, DetectorError> {
    let mut tape = Tape::new();
    let h = tape.constant(hidden.clone());
    let w = tape.constant(params.proj_w.clone());
    let b = tape.constant(params.proj_b.clone());
    let out = network::project_on_tape(&mut tape, h, w, b, None)?;
    Ok(tape.value(out).clone())
}

/// One message-passing layer over fixed edge weights, without dropout.
pub fn gat_layer(x: &Tensor, edges: &RefinedAdjacency, layer: &GatLayerParams) -> Result<Tensor, DetectorError> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let ev = tape.constant(edges.0.clone());
    let heads: Vec<_> = layer.heads.iter().map(|w| tape.constant(w.clone())).collect();
    let shortcut = layer.shortcut.as_ref().map(|w| tape.constant(w.clone()));
    let out = network::gat_on_tape(&mut tape, xv, ev, &heads, shortcut, None)?;
    Ok(tape.value(out).clone())
}

/// Columnwise `[max, mean]` over nodes.
pub fn pool(x: &Tensor) -> Result<Tensor, DetectorError> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = network::pool_on_tape(&mut tape, xv)?;
    Ok(tape.value(out).clone())
}

/// Classifier head over a pooled `1 x 2c` embedding, without dropout.
pub fn classify(pooled: &Tensor, params: &DetectorParams) -> Result<Tensor, DetectorError> {
    let mut tape = Tape::new();
    let p = tape.constant(pooled.clone());
    let mut z = p;
    if let Some((w, b)) = &params.classifier_hidden {
        let (w, b) = (tape.constant(w.clone()), tape.constant(b.clone()));
        let zw = tape.matmul(z, w)?;
        let zb = tape.add(zw, b)?;
        z = tape.relu(zb)?;
    }
    let w = tape.constant(params.classifier_w.clone());
    let b = tape.constant(params.classifier_b.clone());
    let zw = tape.matmul(z, w)?;
    let out = tape.add(zw, b)?;
    Ok(tape.value(out).clone())
}

/// Cross-entropy of `logits` against `class` plus `lambda * ||S||_F^2`.
pub fn loss(logits: &Tensor, class: usize, sensitivity: Option<&Tensor>, lambda: f64) -> Result<f64, DetectorError> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let ce = tape.softmax_cross_entropy(z, class)?;
    let mut total = tape.value(ce).item();
    if let Some(s) = sensitivity {
        total += lambda * s.frobenius_sq();
    }
    Ok(total)
}

/// Inference on one record: both passes, no dropout, sensitivity measured
/// against the configured inference target.
pub fn predict(record: &GraphRecord, params: &DetectorParams) -> Result<Prediction, DetectorError> {
    let out = forward_full(record, params, ForwardSpec::infer(params.config.inference_target))?;
    Ok(Prediction::from_logits(&out.logits))
}

/// Applies a pre-sampled inverted-dropout mask.
pub fn apply_dropout(x: &Tensor, mask: &Arc<Tensor>) -> Result<Tensor, DetectorError> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = tape.mask_mul(xv, Arc::clone(mask))?;
    Ok(tape.value(out).clone())
}
