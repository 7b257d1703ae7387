// SPDX-License-Identifier: MIT OR Apache-2.0

//! Node attribution and causal-subgraph extraction.
//!
//! A token's saliency is the L2 norm of the loss gradient with respect to its
//! hidden-state row. The causal subgraph keeps the most salient tokens and
//! the refined edges between them that survive a weight floor.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{GraphRecord, Label};
use crate::detector::network::{self, HIDDEN_LEAF};
use crate::detector::{forward_full, DetectorError, DetectorParams, ForwardSpec, Prediction, SensitivityTarget};
use crate::engine::{Tape, Tensor};

pub const DEFAULT_NODE_QUANTILE: f64 = 0.2;
pub const DEFAULT_EDGE_FLOOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("{found} tokens supplied for a report over {expected} nodes")]
    TokenMismatch { expected: usize, found: usize },
    #[error("invalid option: {0}")]
    Option(String),
}

/// Which graph the saliency gradient flows through.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SaliencyGraph {
    /// The gated graph used for the prediction (default).
    #[default]
    Refined,
    /// The ungated graph `A ⊙ mask` of the sensitivity pass.
    Unrefined,
}

impl std::str::FromStr for SaliencyGraph {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "refined" => Ok(Self::Refined),
            "unrefined" => Ok(Self::Unrefined),
            other => Err(format!("unrecognized saliency graph {other:?}; expected refined or unrefined")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubgraphOptions {
    /// Fraction of nodes (by saliency rank) to keep, in `(0, 1]`.
    pub node_quantile: f64,
    /// Minimum refined weight of a kept edge.
    pub edge_floor: f64,
    pub target: SensitivityTarget,
    pub graph: SaliencyGraph,
}

impl Default for SubgraphOptions {
    fn default() -> Self {
        Self {
            node_quantile: DEFAULT_NODE_QUANTILE,
            edge_floor: DEFAULT_EDGE_FLOOR,
            target: SensitivityTarget::Predicted,
            graph: SaliencyGraph::Refined,
        }
    }
}

impl SubgraphOptions {
    pub fn validate(&self) -> Result<(), InterpretError> {
        if !(self.node_quantile > 0.0 && self.node_quantile <= 1.0) {
            return Err(InterpretError::Option(format!("node_quantile {} outside (0, 1]", self.node_quantile)));
        }
        if !(self.edge_floor >= 0.0) {
            return Err(InterpretError::Option(format!("edge_floor {} is negative", self.edge_floor)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub node_quantile: f64,
    pub edge_floor: f64,
    /// Smallest saliency that was kept.
    pub node_score_threshold: f64,
}

/// A kept refined edge `src -> dst` (`src <= dst`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeptEdge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyReport {
    pub node_scores: Vec<f64>,
    /// Ascending node indices.
    pub kept_nodes: Vec<usize>,
    /// Ascending by `(dst, src)`.
    pub kept_edges: Vec<KeptEdge>,
    pub prediction: Prediction,
    pub thresholds: Thresholds,
}

struct Attribution {
    scores: Vec<f64>,
    refined: Tensor,
    prediction: Prediction,
}

fn row_norms(g: &Tensor) -> Vec<f64> {
    (0..g.rows())
        .map(|i| g.row_slice(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

fn attribute(record: &GraphRecord, params: &DetectorParams, target: SensitivityTarget, graph: SaliencyGraph) -> Result<Attribution, DetectorError> {
    let spec = ForwardSpec {
        sensitivity_target: target,
        loss_target: Some(target),
        dropout: None,
        frozen_gate_input: None,
    };
    let mut out = forward_full(record, params, spec)?;
    let prediction = Prediction::from_logits(&out.logits);
    let scores = match graph {
        SaliencyGraph::Refined => row_norms(&out.gradients()?[HIDDEN_LEAF]),
        SaliencyGraph::Unrefined => {
            let mut tape = Tape::new();
            let bound = network::bind(&mut tape, record, params)?;
            let edges = tape.mask_mul(bound.a, Arc::new(Tensor::causal_mask(record.len())))?;
            let bb = network::backbone(&mut tape, &bound, edges, None)?;
            let class = match target {
                SensitivityTarget::TrueLabel => record
                    .label
                    .class()
                    .ok_or_else(|| DetectorError::UnknownLabel(record.sample_id.clone()))?,
                SensitivityTarget::Predicted => network::predicted_class(tape.value(bb.logits)),
                SensitivityTarget::HallucinationLogit => 1,
            };
            let ce = tape.softmax_cross_entropy(bb.logits, class)?;
            let g = tape.grad(ce, &[bound.h])?[0];
            row_norms(tape.value(g))
        }
    };
    Ok(Attribution {
        scores,
        refined: out.refined.0,
        prediction,
    })
}

/// Per-token saliency `||∇_{H_i} L||_2` on the refined graph. `L` is the
/// full detector loss measured against `target`, as for the sensitivity.
pub fn node_saliency(record: &GraphRecord, params: &DetectorParams, target: SensitivityTarget) -> Result<Vec<f64>, DetectorError> {
    Ok(attribute(record, params, target, SaliencyGraph::Refined)?.scores)
}

/// Saliency through the chosen graph.
pub fn node_saliency_on(
    record: &GraphRecord,
    params: &DetectorParams,
    target: SensitivityTarget,
    graph: SaliencyGraph,
) -> Result<Vec<f64>, DetectorError> {
    Ok(attribute(record, params, target, graph)?.scores)
}

/// Indices whose score is at least the `k`-th largest score, with
/// `k = ceil(node_quantile * L)`; ties with the threshold are all kept.
/// Returns the kept indices and the threshold.
pub fn select_nodes(scores: &[f64], node_quantile: f64) -> (Vec<usize>, f64) {
    if scores.is_empty() {
        return (Vec::new(), f64::INFINITY);
    }
    let k = ((node_quantile * scores.len() as f64).ceil() as usize).clamp(1, scores.len());
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let threshold = sorted[k - 1];
    let kept = (0..scores.len()).filter(|&i| scores[i] >= threshold).collect();
    (kept, threshold)
}

/// Edges `j -> i` with `j <= i`, `Ã_ij > 0`, `Ã_ij >= edge_floor` and both endpoints kept.
pub fn select_edges(refined: &Tensor, kept_nodes: &[usize], edge_floor: f64) -> Vec<KeptEdge> {
    let mut edges = Vec::new();
    for (pos, &i) in kept_nodes.iter().enumerate() {
        for &j in &kept_nodes[..=pos] {
            let w = refined.get(i, j);
            if w > 0.0 && w >= edge_floor {
                edges.push(KeptEdge { src: j, dst: i, weight: w });
            }
        }
    }
    edges
}

/// Saliency plus the thresholded subgraph of salient nodes and refined edges.
pub fn causal_subgraph(record: &GraphRecord, params: &DetectorParams, options: &SubgraphOptions) -> Result<SaliencyReport, InterpretError> {
    options.validate()?;
    let att = attribute(record, params, options.target, options.graph)?;
    let (kept_nodes, node_score_threshold) = select_nodes(&att.scores, options.node_quantile);
    let kept_edges = select_edges(&att.refined, &kept_nodes, options.edge_floor);
    Ok(SaliencyReport {
        node_scores: att.scores,
        kept_nodes,
        kept_edges,
        prediction: att.prediction,
        thresholds: Thresholds {
            node_quantile: options.node_quantile,
            edge_floor: options.edge_floor,
            node_score_threshold,
        },
    })
}

/// Rounds to 9 significant digits.
pub fn round_sig9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

fn check_tokens(report: &SaliencyReport, tokens: &[String]) -> Result<(), InterpretError> {
    if tokens.len() != report.node_scores.len() {
        return Err(InterpretError::TokenMismatch {
            expected: report.node_scores.len(),
            found: tokens.len(),
        });
    }
    Ok(())
}

fn dot_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out
}

fn label_str(l: Label) -> &'static str {
    match l {
        Label::Fact => "fact",
        Label::Hallucination => "hallucination",
        Label::Unknown => "unknown",
    }
}

/// Graphviz digraph of the kept nodes and edges, in ascending order.
pub fn export_dot(report: &SaliencyReport, tokens: &[String]) -> Result<String, InterpretError> {
    check_tokens(report, tokens)?;
    let mut out = String::new();
    let t = &report.thresholds;
    let _ = writeln!(
        out,
        "// causal subgraph: p_hallucination={} label={} node_quantile={} edge_floor={}",
        round_sig9(report.prediction.p_hallucination),
        label_str(report.prediction.label),
        round_sig9(t.node_quantile),
        round_sig9(t.edge_floor)
    );
    if report.kept_nodes.is_empty() && report.kept_edges.is_empty() {
        out.push_str("digraph causal { }\n");
        return Ok(out);
    }
    out.push_str("digraph causal {\n");
    for &i in &report.kept_nodes {
        let _ = writeln!(
            out,
            "  n{i} [label=\"{i}:{}\", tooltip=\"saliency={}\"];",
            dot_escape(&tokens[i]),
            round_sig9(report.node_scores[i])
        );
    }
    for e in &report.kept_edges {
        let w = round_sig9(e.weight);
        let _ = writeln!(out, "  n{} -> n{} [weight={w}, label=\"{w}\"];", e.src, e.dst);
    }
    out.push_str("}\n");
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsonPrediction {
    pub p_hallucination: f64,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsonNode {
    pub index: usize,
    pub token: String,
    pub saliency: f64,
}

/// Serialized form of a [`SaliencyReport`]; numbers carry 9 significant digits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportJson {
    pub prediction: JsonPrediction,
    pub thresholds: Thresholds,
    pub nodes: Vec<JsonNode>,
    pub edges: Vec<KeptEdge>,
}

impl ReportJson {
    pub fn from_report(report: &SaliencyReport, tokens: &[String]) -> Result<Self, InterpretError> {
        check_tokens(report, tokens)?;
        let t = &report.thresholds;
        Ok(Self {
            prediction: JsonPrediction {
                p_hallucination: round_sig9(report.prediction.p_hallucination),
                label: report.prediction.label,
            },
            thresholds: Thresholds {
                node_quantile: round_sig9(t.node_quantile),
                edge_floor: round_sig9(t.edge_floor),
                node_score_threshold: round_sig9(t.node_score_threshold),
            },
            nodes: report
                .kept_nodes
                .iter()
                .map(|&i| JsonNode {
                    index: i,
                    token: tokens[i].clone(),
                    saliency: round_sig9(report.node_scores[i]),
                })
                .collect(),
            edges: report
                .kept_edges
                .iter()
                .map(|e| KeptEdge {
                    weight: round_sig9(e.weight),
                    ..*e
                })
                .collect(),
        })
    }
}

/// JSON `{prediction, thresholds, nodes, edges}` with fixed key order.
pub fn export_json(report: &SaliencyReport, tokens: &[String]) -> Result<String, InterpretError> {
    let json = ReportJson::from_report(report, tokens)?;
    Ok(serde_json::to_string_pretty(&json).expect("plain structs serialize"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_rule_keeps_ties() {
        assert_eq!(select_nodes(&[1.0; 5], 0.2).0, vec![0, 1, 2, 3, 4]);
        assert_eq!(select_nodes(&[0.1, 0.9, 0.5, 0.3, 0.2], 0.2).0, vec![1]);
        assert_eq!(select_nodes(&[0.1, 0.9, 0.5, 0.3, 0.2], 0.5).0, vec![1, 2, 3]);
        assert_eq!(select_nodes(&[0.1, 0.9, 0.5], 1.0).0, vec![0, 1, 2]);
    }

    #[test]
    fn edges_respect_floor_and_closure() {
        let r = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.5, 0.5, 0.0], vec![0.0, 0.0005, 0.9995]]);
        let e = select_edges(&r, &[0, 1, 2], 1e-3);
        assert_eq!(
            e.iter().map(|e| (e.src, e.dst)).collect::<Vec<_>>(),
            vec![(0, 0), (0, 1), (1, 1), (2, 2)]
        );
        let e = select_edges(&r, &[1, 2], 0.0);
        assert_eq!(e.iter().map(|e| (e.src, e.dst)).collect::<Vec<_>>(), vec![(1, 1), (1, 2), (2, 2)]);
    }

    #[test]
    fn sig9_rounding_is_idempotent() {
        for x in [std::f64::consts::PI, 1e-7 / 3.0, -2.5e10 / 7.0, 0.0] {
            let r = round_sig9(x);
            assert_eq!(round_sig9(r), r);
            assert!((r - x).abs() <= 1e-8 * x.abs());
        }
    }
}
