// SPDX-License-Identifier: MIT OR Apache-2.0

//! The fully-resolved run configuration: TOML file values with command-line
//! flags layered on top.

use std::path::{Path, PathBuf};

use anyhow::Context;
use causalgaze::detector::{DetectorConfig, SensitivityTarget};
use causalgaze::interpret::{SaliencyGraph, DEFAULT_EDGE_FLOOR, DEFAULT_NODE_QUANTILE};
use causalgaze::synth::SynthConfig;
use causalgaze::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::exit::{io_failure, usage};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub node_quantile: f64,
    pub edge_floor: f64,
    pub target: SensitivityTarget,
    pub graph: SaliencyGraph,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            node_quantile: DEFAULT_NODE_QUANTILE,
            edge_floor: DEFAULT_EDGE_FLOOR,
            target: SensitivityTarget::Predicted,
            graph: SaliencyGraph::Refined,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Number of seed-averaged training runs.
    pub runs: usize,
    /// Keep only records extracted from this layer.
    pub layer: Option<u32>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { runs: 1, layer: None }
    }
}

/// Merged view of every module configuration plus paths and run controls.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub paths: Paths,
    pub run: RunConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub detector: DetectorConfig,
    pub explain: ExplainConfig,
}

impl CliConfig {
    /// Defaults, or the contents of `path` when given.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| io_failure(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
            .context("loading configuration")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("configuration serializes to JSON")
    }

    pub fn require_data(&self) -> anyhow::Result<&Path> {
        self.paths.data.as_deref().ok_or_else(|| usage("--data is required (flag or [paths] data)"))
    }

    pub fn require_out(&self) -> anyhow::Result<&Path> {
        self.paths.out.as_deref().ok_or_else(|| usage("--out is required (flag or [paths] out)"))
    }

    pub fn require_checkpoint(&self) -> anyhow::Result<&Path> {
        self.paths
            .checkpoint
            .as_deref()
            .ok_or_else(|| usage("--checkpoint is required (flag or [paths] checkpoint)"))
    }
}
