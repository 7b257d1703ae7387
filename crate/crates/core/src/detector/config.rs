// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// How the sensitivity regularizer `lambda * ||S||_F^2` is differentiated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegMode {
    /// Exact parameter gradient through the first-order gradient that defines `S`.
    #[default]
    SecondOrder,
    /// `S` is detached; the regularizer is reported but contributes no gradient.
    Detached,
}

/// Variants that bypass the gradient-guided sensitivity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    /// `S` replaced by the all-ones matrix.
    WoGradient,
    /// `S` replaced by a seeded uniform(0, 1) matrix, fixed per sample.
    RandomGradient,
    /// The gate sees only `A_ij`.
    MlpA,
}

impl Ablation {
    /// Whether the gate consumes a sensitivity channel at all.
    pub fn gate_input_dim(self) -> usize {
        match self {
            Ablation::MlpA => 1,
            _ => 2,
        }
    }

    /// Whether `S` is computed from the detector's own gradient.
    pub fn uses_gradient(self) -> bool {
        self == Ablation::None
    }
}

/// Which class the sensitivity (and saliency) loss is measured against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SensitivityTarget {
    /// The record's own label; fails on unlabelled records.
    TrueLabel,
    /// The detector's own arg-max prediction.
    #[default]
    Predicted,
    /// Always the hallucination class.
    HallucinationLogit,
}

macro_rules! kebab_enum_str {
    ($ty:ty { $($variant:path => $s:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $s),+ })
            }
        }
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($s => Ok($variant),)+
                    other => Err(format!("unrecognized value {other:?}; expected one of: {}", [$($s),+].join(", "))),
                }
            }
        }
    };
}

kebab_enum_str!(RegMode { RegMode::SecondOrder => "second-order", RegMode::Detached => "detached" });
kebab_enum_str!(Ablation {
    Ablation::None => "none",
    Ablation::WoGradient => "wo-gradient",
    Ablation::RandomGradient => "random-gradient",
    Ablation::MlpA => "mlp-a",
});
kebab_enum_str!(SensitivityTarget {
    SensitivityTarget::TrueLabel => "true-label",
    SensitivityTarget::Predicted => "predicted",
    SensitivityTarget::HallucinationLogit => "hallucination-logit",
});

/// Architecture and objective settings; stored in every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Hidden-state width `d` of the input records.
    pub input_dim: usize,
    pub proj_dim: usize,
    /// Output width of each GAT layer.
    pub gat_dims: Vec<usize>,
    pub heads: usize,
    pub gate_hidden: usize,
    /// Optional hidden layer in the classifier head.
    pub classifier_hidden: Option<usize>,
    pub dropout_p: f64,
    pub lambda: f64,
    pub reg_mode: RegMode,
    pub ablation: Ablation,
    /// Keep the gate scale `a` and offset `b` at their initial values.
    pub freeze_gate_scale: bool,
    /// Loss target for sensitivity when the label is not used (inference).
    pub inference_target: SensitivityTarget,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            proj_dim: 128,
            gat_dims: vec![64, 64],
            heads: 4,
            gate_hidden: 16,
            classifier_hidden: None,
            dropout_p: 0.2,
            lambda: 0.02,
            reg_mode: RegMode::SecondOrder,
            ablation: Ablation::None,
            freeze_gate_scale: false,
            inference_target: SensitivityTarget::Predicted,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn with_input_dim(input_dim: usize) -> Self {
        Self {
            input_dim,
            ..Self::default()
        }
    }

    /// Width of the pooled graph embedding (max and mean concatenated).
    pub fn pooled_dim(&self) -> usize {
        2 * self.gat_dims.last().copied().unwrap_or(self.proj_dim)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.input_dim == 0 || self.proj_dim == 0 || self.gate_hidden == 0 || self.heads == 0 {
            return Err("dimensions, heads and gate_hidden must be positive".into());
        }
        if let Some(&bad) = self.gat_dims.iter().find(|&&w| w == 0 || w % self.heads != 0) {
            return Err(format!("GAT width {bad} is not a positive multiple of {} heads", self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if self.classifier_hidden == Some(0) {
            return Err("classifier_hidden must be positive when set".into());
        }
        if !(self.lambda >= 0.0) {
            return Err("lambda must be non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enum_strings_round_trip() {
        for a in [Ablation::None, Ablation::WoGradient, Ablation::RandomGradient, Ablation::MlpA] {
            assert_eq!(a.to_string().parse::<Ablation>().unwrap(), a);
        }
        assert!("bogus".parse::<RegMode>().is_err());
    }

    #[test]
    fn default_dims_follow_the_reference_architecture() {
        let c = DetectorConfig::default();
        assert_eq!((c.proj_dim, c.gat_dims.as_slice(), c.heads, c.pooled_dim()), (128, &[64, 64][..], 4, 128));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn indivisible_width_is_rejected() {
        let c = DetectorConfig {
            gat_dims: vec![64, 30],
            ..DetectorConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
