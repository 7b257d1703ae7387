// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tape-level construction of the two-pass detector.
//!
//! Pass 1 runs the backbone on the unrefined graph `A ⊙ mask` and
//! differentiates its cross-entropy with respect to `A` to obtain the
//! sensitivity `S`. Pass 2 gates the edges with `S` (as a constant input),
//! runs the backbone on the refined graph and adds `lambda * ||S||_F^2`,
//! where `S` keeps its recorded dependence on the parameters unless the
//! regularizer is detached.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Ablation, DetectorConfig, RegMode, SensitivityTarget};
use super::params::DetectorParams;
use super::DetectorError;
use crate::dataio::GraphRecord;
use crate::engine::{Gradients, Tape, Tensor, Var};
use crate::refine::{gate_on_tape, refine_on_tape, GateVars, RefinedAdjacency, SensitivityMatrix};
use crate::seed::keyed_seed;

pub const HIDDEN_LEAF: &str = "H";
pub const ATTENTION_LEAF: &str = "A";

/// Record tensors and parameters registered as named tape leaves.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub h: Var,
    pub a: Var,
    pub proj_w: Var,
    pub proj_b: Var,
    pub gate: GateVars,
    pub gat: Vec<(Vec<Var>, Option<Var>)>,
    pub classifier_hidden: Option<(Var, Var)>,
    pub classifier_w: Var,
    pub classifier_b: Var,
    pub by_name: BTreeMap<String, Var>,
}

pub fn bind(tape: &mut Tape, record: &GraphRecord, params: &DetectorParams) -> Result<BoundParams, DetectorError> {
    if record.dim() != params.proj_w.rows() {
        return Err(DetectorError::DimMismatch {
            expected: params.proj_w.rows(),
            found: record.dim(),
        });
    }
    let h = tape.leaf(HIDDEN_LEAF, record.hidden.clone())?;
    let a = tape.leaf(ATTENTION_LEAF, record.attention.clone())?;
    let mut by_name = BTreeMap::new();
    for (name, t) in params.named() {
        let v = tape.leaf(name.clone(), t.clone())?;
        by_name.insert(name, v);
    }
    let get = |n: &str| by_name[n];
    let gate = GateVars {
        w1: get("gate_w1"),
        b1: get("gate_b1"),
        w2: get("gate_w2"),
        b2: get("gate_b2"),
        a: get("gate_a"),
        b: get("gate_b"),
    };
    let gat = params
        .gat_layers
        .iter()
        .enumerate()
        .map(|(k, layer)| {
            let heads = (0..layer.heads.len()).map(|h| get(&format!("gat{k}_head{h}"))).collect();
            let shortcut = layer.shortcut.as_ref().map(|_| get(&format!("gat{k}_shortcut")));
            (heads, shortcut)
        })
        .collect();
    let classifier_hidden = params
        .classifier_hidden
        .as_ref()
        .map(|_| (get("cls_hidden_w"), get("cls_hidden_b")));
    Ok(BoundParams {
        h,
        a,
        proj_w: get("proj_w"),
        proj_b: get("proj_b"),
        gate,
        gat,
        classifier_hidden,
        classifier_w: get("cls_w"),
        classifier_b: get("cls_b"),
        by_name,
    })
}

/// Pre-sampled inverted-dropout masks (entries `0` or `1/(1-p)`) for every
/// hidden layer of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMasks {
    pub proj: Arc<Tensor>,
    pub gat: Vec<Arc<Tensor>>,
    pub classifier_hidden: Option<Arc<Tensor>>,
}

impl DropoutMasks {
    pub fn sample<R: Rng>(config: &DetectorConfig, len: usize, rng: &mut R) -> Self {
        let p = config.dropout_p;
        let keep = 1.0 / (1.0 - p);
        let mut draw = |rows: usize, cols: usize| {
            Arc::new(Tensor::from_fn(rows, cols, |_, _| if rng.random::<f64>() < p { 0.0 } else { keep }))
        };
        let proj = draw(len, config.proj_dim);
        let gat = config.gat_dims.iter().map(|&c| draw(len, c)).collect();
        let classifier_hidden = config.classifier_hidden.map(|h| draw(1, h));
        Self {
            proj,
            gat,
            classifier_hidden,
        }
    }
}

fn maybe_drop(tape: &mut Tape, x: Var, mask: Option<&Arc<Tensor>>) -> Result<Var, DetectorError> {
    Ok(match mask {
        Some(m) => tape.mask_mul(x, Arc::clone(m))?,
        None => x,
    })
}

/// `relu(H W + b)`, then dropout.
pub fn project_on_tape(
    tape: &mut Tape,
    h: Var,
    w: Var,
    b: Var,
    mask: Option<&Arc<Tensor>>,
) -> Result<Var, DetectorError> {
    let rows = tape.shape(h)[0];
    let xw = tape.matmul(h, w)?;
    let bias = tape.broadcast_rows(b, rows)?;
    let pre = tape.add(xw, bias)?;
    let out = tape.relu(pre)?;
    maybe_drop(tape, out, mask)
}

/// One residual message-passing layer: every head aggregates
/// `Σ_j Ã_ij (W_h)ᵀ x_j` with the shared coefficients `Ã`; heads are
/// concatenated, added to the (possibly projected) input, then relu and
/// dropout are applied.
pub fn gat_on_tape(
    tape: &mut Tape,
    x: Var,
    edges: Var,
    heads: &[Var],
    shortcut: Option<Var>,
    mask: Option<&Arc<Tensor>>,
) -> Result<Var, DetectorError> {
    let mut messages = Vec::with_capacity(heads.len());
    for &w in heads {
        let xw = tape.matmul(x, w)?;
        messages.push(tape.matmul(edges, xw)?);
    }
    let message = tape.concat_cols(&messages)?;
    let residual = match shortcut {
        Some(w) => tape.matmul(x, w)?,
        None => {
            let (sx, sm) = (tape.shape(x), tape.shape(message));
            if sx != sm {
                return Err(DetectorError::MissingShortcut { input: sx[1], output: sm[1] });
            }
            x
        }
    };
    let sum = tape.add(residual, message)?;
    let out = tape.relu(sum)?;
    maybe_drop(tape, out, mask)
}

/// Columnwise max and mean over nodes, concatenated.
pub fn pool_on_tape(tape: &mut Tape, x: Var) -> Result<Var, DetectorError> {
    let mx = tape.max_over_rows(x)?;
    let mean = tape.mean_over_rows(x)?;
    Ok(tape.concat_cols(&[mx, mean])?)
}

pub fn classify_on_tape(
    tape: &mut Tape,
    pooled: Var,
    bound: &BoundParams,
    mask: Option<&Arc<Tensor>>,
) -> Result<Var, DetectorError> {
    let z = match bound.classifier_hidden {
        Some((w, b)) => {
            let zw = tape.matmul(pooled, w)?;
            let zb = tape.add(zw, b)?;
            let z = tape.relu(zb)?;
            maybe_drop(tape, z, mask)?
        }
        None => pooled,
    };
    let logits = tape.matmul(z, bound.classifier_w)?;
    Ok(tape.add(logits, bound.classifier_b)?)
}

pub struct BackboneOutput {
    pub pooled: Var,
    pub logits: Var,
}

/// Projection, stacked message passing over `edges`, pooling and the classifier head.
pub fn backbone(
    tape: &mut Tape,
    bound: &BoundParams,
    edges: Var,
    masks: Option<&DropoutMasks>,
) -> Result<BackboneOutput, DetectorError> {
    let mut x = project_on_tape(tape, bound.h, bound.proj_w, bound.proj_b, masks.map(|m| &m.proj))?;
    for (k, (heads, shortcut)) in bound.gat.iter().enumerate() {
        x = gat_on_tape(tape, x, edges, heads, *shortcut, masks.map(|m| &m.gat[k]))?;
    }
    let pooled = pool_on_tape(tape, x)?;
    let logits = classify_on_tape(tape, pooled, bound, masks.and_then(|m| m.classifier_hidden.as_ref()))?;
    Ok(BackboneOutput { pooled, logits })
}

/// Class predicted from a `1 x 2` logit row; ties go to hallucination.
pub fn predicted_class(logits: &Tensor) -> usize {
    usize::from(logits.get(0, 1) >= logits.get(0, 0))
}

fn target_class(target: SensitivityTarget, record: &GraphRecord, logits: &Tensor) -> Result<usize, DetectorError> {
    match target {
        SensitivityTarget::TrueLabel => record
            .label
            .class()
            .ok_or_else(|| DetectorError::UnknownLabel(record.sample_id.clone())),
        SensitivityTarget::Predicted => Ok(predicted_class(logits)),
        SensitivityTarget::HallucinationLogit => Ok(1),
    }
}

pub struct SensitivityVars {
    /// `|A ⊙ ∇_A L|` with its dependence on the parameters recorded.
    pub attached: Var,
    pub pass1_logits: Var,
}

/// Pass 1: backbone on `A ⊙ mask` without dropout, cross-entropy against
/// `target`, gradient with respect to `A`.
pub fn sensitivity_pass(
    tape: &mut Tape,
    record: &GraphRecord,
    bound: &BoundParams,
    params: &DetectorParams,
    target: SensitivityTarget,
) -> Result<SensitivityVars, DetectorError> {
    let _ = params;
    let l = record.len();
    let edges = tape.mask_mul(bound.a, Arc::new(Tensor::causal_mask(l)))?;
    let out = backbone(tape, bound, edges, None)?;
    let class = target_class(target, record, tape.value(out.logits))?;
    let ce = tape.softmax_cross_entropy(out.logits, class)?;
    let grad_a = tape.grad(ce, &[bound.a])?[0];
    let weighted = tape.mul(bound.a, grad_a)?;
    let attached = tape.abs(weighted)?;
    Ok(SensitivityVars {
        attached,
        pass1_logits: out.logits,
    })
}

/// What a forward evaluation computes.
#[derive(Clone, Copy, Debug)]
pub struct ForwardSpec<'a> {
    /// Loss target of the sensitivity pass.
    pub sensitivity_target: SensitivityTarget,
    /// Loss target of the prediction pass; `None` skips the loss.
    pub loss_target: Option<SensitivityTarget>,
    pub dropout: Option<&'a DropoutMasks>,
    /// Replaces the (detached) sensitivity fed to the gate. Finite-difference
    /// oracles use this to hold the gate input at its base-point value.
    pub frozen_gate_input: Option<&'a Tensor>,
}

impl<'a> ForwardSpec<'a> {
    /// Training: both passes measured against the true label, optional dropout.
    pub fn train(dropout: Option<&'a DropoutMasks>) -> Self {
        Self {
            sensitivity_target: SensitivityTarget::TrueLabel,
            loss_target: Some(SensitivityTarget::TrueLabel),
            dropout,
            frozen_gate_input: None,
        }
    }

    /// Inference: no dropout, no loss; sensitivity against `target`.
    pub fn infer(target: SensitivityTarget) -> Self {
        Self {
            sensitivity_target: target,
            loss_target: None,
            dropout: None,
            frozen_gate_input: None,
        }
    }

    /// Deterministic full objective against the true label.
    pub fn objective() -> Self {
        Self::train(None)
    }
}

/// The recorded computation behind a [`ForwardOutput`].
pub struct ForwardGraph {
    pub tape: Tape,
    pub bound: BoundParams,
    pub logits: Var,
    pub loss: Option<Var>,
    pub sensitivity: Option<Var>,
}

pub struct ForwardOutput {
    pub logits: Tensor,
    pub sensitivity: SensitivityMatrix,
    pub refined: RefinedAdjacency,
    pub pooled: Tensor,
    pub cross_entropy: Option<f64>,
    /// `lambda * ||S||_F^2`; absent for ablations that bypass `S`.
    pub regularizer: Option<f64>,
    pub loss: Option<f64>,
    pub graph: ForwardGraph,
}

impl ForwardOutput {
    /// Gradient of the loss with respect to `H`, `A` and every parameter.
    pub fn gradients(&mut self) -> Result<Gradients, DetectorError> {
        let loss = self.graph.loss.ok_or(DetectorError::NoLoss)?;
        Ok(self.graph.tape.backward(loss)?)
    }
}

/// Seeded stand-in sensitivity for the random-gradient variant, fixed per sample.
pub fn random_sensitivity(config: &DetectorConfig, record: &GraphRecord) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(keyed_seed(config.seed, "random-gradient", &record.sample_id));
    let l = record.len();
    Tensor::random_uniform(l, l, 0.0, 1.0, &mut rng)
}

/// Runs both passes on one record.
pub fn forward_full(
    record: &GraphRecord,
    params: &DetectorParams,
    spec: ForwardSpec<'_>,
) -> Result<ForwardOutput, DetectorError> {
    let config = &params.config;
    let l = record.len();
    let mut tape = Tape::new();
    let bound = bind(&mut tape, record, params)?;

    let (s_reg, s_gate, s_value) = match config.ablation {
        Ablation::None => {
            let sv = sensitivity_pass(&mut tape, record, &bound, params, spec.sensitivity_target)?;
            let s_reg = match config.reg_mode {
                RegMode::SecondOrder => sv.attached,
                RegMode::Detached => tape.detach(sv.attached),
            };
            let s_gate = match spec.frozen_gate_input {
                Some(t) => tape.constant(t.clone()),
                None => tape.detach(sv.attached),
            };
            let value = tape.value(sv.attached).clone();
            (Some(s_reg), Some(s_gate), value)
        }
        Ablation::WoGradient => {
            let ones = Tensor::ones(l, l);
            (None, Some(tape.constant(ones.clone())), ones)
        }
        Ablation::RandomGradient => {
            let r = random_sensitivity(config, record);
            (None, Some(tape.constant(r.clone())), r)
        }
        Ablation::MlpA => (None, None, Tensor::zeros(l, l)),
    };

    let gate = gate_on_tape(&mut tape, bound.a, s_gate, &bound.gate)?;
    let refined = refine_on_tape(&mut tape, bound.a, gate)?;
    let out = backbone(&mut tape, &bound, refined, spec.dropout)?;

    let (mut cross_entropy, mut regularizer, mut loss_value, mut loss) = (None, None, None, None);
    if let Some(target) = spec.loss_target {
        let class = target_class(target, record, tape.value(out.logits))?;
        let ce = tape.softmax_cross_entropy(out.logits, class)?;
        cross_entropy = Some(tape.value(ce).item());
        let total = match s_reg {
            Some(s) => {
                let fro = tape.frobenius_sq(s)?;
                let reg = tape.scale(fro, config.lambda)?;
                regularizer = Some(tape.value(reg).item());
                tape.add(ce, reg)?
            }
            None => ce,
        };
        loss_value = Some(tape.value(total).item());
        loss = Some(total);
    }

    Ok(ForwardOutput {
        logits: tape.value(out.logits).clone(),
        sensitivity: SensitivityMatrix(s_value),
        refined: RefinedAdjacency(tape.value(refined).clone()),
        pooled: tape.value(out.pooled).clone(),
        cross_entropy,
        regularizer,
        loss: loss_value,
        graph: ForwardGraph {
            tape,
            bound,
            logits: out.logits,
            loss,
            sensitivity: s_reg,
        },
    })
}
