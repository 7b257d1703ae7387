// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gradient-guided edge refinement.
//!
//! Edge sensitivity is `S = |A ⊙ ∇_A L|`, where `L` is the detector loss
//! evaluated on the unrefined causal graph (the first of two passes). A
//! per-edge gate `a·σ(mlp([A_ij, S_ij])) + b` then rescales each edge, the
//! gate is clamped at zero, and the autoregressive mask is re-applied:
//! `Ã = A ⊙ max(gate, 0) ⊙ mask`.

use std::sync::Arc;

use rand::Rng;

use crate::dataio::GraphRecord;
use crate::detector::glorot;
use crate::detector::{network, DetectorError, DetectorParams, SensitivityTarget};
use crate::engine::{EngineError, Tape, Tensor, Var};

/// Edge sensitivity: non-negative, zero wherever the attention is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityMatrix(pub Tensor);

impl SensitivityMatrix {
    pub fn values(&self) -> &Tensor {
        &self.0
    }
}

/// Gated, clamped, masked edge weights `Ã`.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinedAdjacency(pub Tensor);

impl RefinedAdjacency {
    pub fn values(&self) -> &Tensor {
        &self.0
    }
}

/// Per-edge gate: a one-hidden-layer relu MLP over `(A_ij, S_ij)` (or just
/// `A_ij` for the attention-only variant), squashed by a sigmoid and mapped
/// through the learnable scale `a` and offset `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub a: Tensor,
    pub b: Tensor,
}

impl GateParams {
    pub fn init<R: Rng>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w1: glorot(input_dim, hidden, rng),
            b1: Tensor::zeros(1, hidden),
            w2: glorot(hidden, 1, rng),
            b2: Tensor::zeros(1, 1),
            a: Tensor::scalar(1.0),
            b: Tensor::scalar(0.0),
        }
    }

    /// All-zero MLP with the given scale and offset.
    pub fn zeroed(input_dim: usize, hidden: usize, a: f64, b: f64) -> Self {
        Self {
            w1: Tensor::zeros(input_dim, hidden),
            b1: Tensor::zeros(1, hidden),
            w2: Tensor::zeros(hidden, 1),
            b2: Tensor::zeros(1, 1),
            a: Tensor::scalar(a),
            b: Tensor::scalar(b),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("gate_w1".into(), &self.w1),
            ("gate_b1".into(), &self.b1),
            ("gate_w2".into(), &self.w2),
            ("gate_b2".into(), &self.b2),
            ("gate_a".into(), &self.a),
            ("gate_b".into(), &self.b),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("gate_w1".into(), &mut self.w1),
            ("gate_b1".into(), &mut self.b1),
            ("gate_w2".into(), &mut self.w2),
            ("gate_b2".into(), &mut self.b2),
            ("gate_a".into(), &mut self.a),
            ("gate_b".into(), &mut self.b),
        ]
    }
}

/// Gate parameters bound to tape vars.
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub a: Var,
    pub b: Var,
}

impl GateVars {
    /// Records the gate parameters as constants (no gradient).
    pub fn constants(tape: &mut Tape, gp: &GateParams) -> Self {
        Self {
            w1: tape.constant(gp.w1.clone()),
            b1: tape.constant(gp.b1.clone()),
            w2: tape.constant(gp.w2.clone()),
            b2: tape.constant(gp.b2.clone()),
            a: tape.constant(gp.a.clone()),
            b: tape.constant(gp.b.clone()),
        }
    }
}

/// Records the full `L x L` gate matrix. `s` is `None` for the
/// attention-only gate.
pub fn gate_on_tape(tape: &mut Tape, a: Var, s: Option<Var>, gv: &GateVars) -> Result<Var, EngineError> {
    let [l, _] = tape.shape(a);
    let n = l * l;
    let a_col = tape.reshape(a, n, 1)?;
    let x = match s {
        Some(s) => {
            let s_col = tape.reshape(s, n, 1)?;
            tape.concat_cols(&[a_col, s_col])?
        }
        None => a_col,
    };
    let hidden = tape.matmul(x, gv.w1)?;
    let bias = tape.broadcast_rows(gv.b1, n)?;
    let hidden = tape.add(hidden, bias)?;
    let hidden = tape.relu(hidden)?;
    let z = tape.matmul(hidden, gv.w2)?;
    let b2 = tape.expand(gv.b2, n, 1)?;
    let z = tape.add(z, b2)?;
    let sig = tape.sigmoid(z)?;
    let scaled = tape.scale_by(sig, gv.a)?;
    let offset = tape.expand(gv.b, n, 1)?;
    let g = tape.add(scaled, offset)?;
    tape.reshape(g, l, l)
}

/// Records `A ⊙ max(gate, 0) ⊙ mask`.
pub fn refine_on_tape(tape: &mut Tape, a: Var, gate: Var) -> Result<Var, EngineError> {
    let [l, _] = tape.shape(a);
    let clamped = tape.clamp_min(gate, 0.0)?;
    let prod = tape.mul(a, clamped)?;
    tape.mask_mul(prod, Arc::new(Tensor::causal_mask(l)))
}

/// Evaluates the per-edge gate over a whole attention map.
pub fn gate(a: &Tensor, s: Option<&SensitivityMatrix>, gp: &GateParams) -> Result<Tensor, EngineError> {
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let sv = s.map(|s| tape.constant(s.0.clone()));
    let gv = GateVars::constants(&mut tape, gp);
    let g = gate_on_tape(&mut tape, av, sv, &gv)?;
    Ok(tape.value(g).clone())
}

/// `Ã = A ⊙ max(gate, 0) ⊙ mask`.
pub fn refine_edges(a: &Tensor, gate_values: &Tensor) -> Result<RefinedAdjacency, EngineError> {
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let gv = tape.constant(gate_values.clone());
    let r = refine_on_tape(&mut tape, av, gv)?;
    Ok(RefinedAdjacency(tape.value(r).clone()))
}

/// First pass of the two-pass scheme: evaluates the detector on the
/// unrefined graph `A ⊙ mask`, takes the cross-entropy against `target`,
/// and returns `|A ⊙ ∇_A L|`.
pub fn compute_sensitivity(
    record: &GraphRecord,
    params: &DetectorParams,
    target: SensitivityTarget,
) -> Result<SensitivityMatrix, DetectorError> {
    let mut tape = Tape::new();
    let bound = network::bind(&mut tape, record, params)?;
    let s = network::sensitivity_pass(&mut tape, record, &bound, params, target)?;
    Ok(SensitivityMatrix(tape.value(s.attached).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_mlp_gate_is_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::random_uniform(4, 4, 0.0, 1.0, &mut rng);
        let s = SensitivityMatrix(Tensor::random_uniform(4, 4, 0.0, 1.0, &mut rng));
        let g = gate(&a, Some(&s), &GateParams::zeroed(2, 16, 1.0, 0.0)).unwrap();
        assert!(g.data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn zero_scale_gate_is_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut gp = GateParams::init(2, 16, &mut rng);
        gp.a = Tensor::scalar(0.0);
        gp.b = Tensor::scalar(0.3);
        let a = Tensor::random_uniform(3, 3, 0.0, 1.0, &mut rng);
        let s = SensitivityMatrix(Tensor::random_uniform(3, 3, 0.0, 1.0, &mut rng));
        let g = gate(&a, Some(&s), &gp).unwrap();
        assert!(g.data().iter().all(|&x| x == 0.3));
    }

    #[test]
    fn single_edge_matches_scalar_evaluation() {
        let gp = GateParams {
            w1: Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]]),
            b1: Tensor::row(&[0.1, 0.3]),
            w2: Tensor::from_rows(&[vec![1.5], vec![-0.75]]),
            b2: Tensor::scalar(-0.2),
            a: Tensor::scalar(1.2),
            b: Tensor::scalar(0.05),
        };
        let (a, s) = (0.7_f64, 0.2_f64);
        let h0 = (0.5 * a + 2.0 * s + 0.1_f64).max(0.0);
        let h1 = (-1.0 * a + 0.25 * s + 0.3_f64).max(0.0);
        let z = 1.5 * h0 - 0.75 * h1 - 0.2;
        let expected = 1.2 / (1.0 + (-z).exp()) + 0.05;
        let g = gate(&Tensor::scalar(a), Some(&SensitivityMatrix(Tensor::scalar(s))), &gp).unwrap();
        assert!((g.item() - expected).abs() < 1e-15, "{} vs {expected}", g.item());
    }

    #[test]
    fn attention_only_gate_ignores_sensitivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gp = GateParams::init(1, 16, &mut rng);
        let a = Tensor::random_uniform(3, 3, 0.0, 1.0, &mut rng);
        assert_eq!(gate(&a, None, &gp).unwrap().shape(), [3, 3]);
    }

    #[test]
    fn identity_gate_keeps_masked_attention() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.4, 0.6]]);
        let r = refine_edges(&a, &Tensor::ones(2, 2)).unwrap();
        assert_eq!(r.values(), &a);
    }

    #[test]
    fn negative_gate_clamps_to_zero() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.4, 0.6]]);
        let r = refine_edges(&a, &Tensor::filled(2, 2, -3.0)).unwrap();
        assert!(r.values().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hand_computed_refinement() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.4, 0.6]]);
        let g = Tensor::from_rows(&[vec![0.5, 9.0], vec![0.25, 1.0]]);
        let r = refine_edges(&a, &g).unwrap();
        assert_eq!(r.values().data(), &[0.5, 0.0, 0.1, 0.6]);
    }

    #[test]
    fn upper_triangle_is_masked_even_if_attention_leaks() {
        let a = Tensor::ones(3, 3);
        let r = refine_edges(&a, &Tensor::ones(3, 3)).unwrap();
        for i in 0..3 {
            for j in (i + 1)..3 {
                assert_eq!(r.values().get(i, j), 0.0);
            }
        }
    }
}
