// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hallucination detection over dynamic causal graphs built from a language
//! model's hidden states and attention map.
//!
//! The pipeline: [`dataio`] loads graph records, [`refine`] scores edges by
//! gradient sensitivity and gates them, [`detector`] classifies the refined
//! graph, [`train`] fits the detector, and [`interpret`] extracts salient
//! subgraphs. [`engine`] is the differentiation engine underneath.

pub mod dataio;
pub mod detector;
pub mod engine;
pub mod interpret;
pub mod refine;
pub mod seed;
pub mod synth;
pub mod train;
pub mod verify;
