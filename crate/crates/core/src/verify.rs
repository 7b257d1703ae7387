// SPDX-License-Identifier: MIT OR Apache-2.0

//! Finite-difference verification of the detector's gradients.
//!
//! Each trial draws a random record (`L` in `[2, 6]`, `d` in `[3, 8]`) and
//! randomly perturbed parameters of the default architecture, then compares
//! reverse-mode gradients against central differences:
//!
//! * the full loss with respect to `H`, `A` (every coordinate) and every
//!   parameter tensor (a seeded sample of coordinates per tensor);
//! * the sensitivity regularizer `lambda ||S||_F^2` with respect to every
//!   parameter tensor, where the finite differences re-run the first-order
//!   gradient that defines `S`;
//! * separately, `S` itself against `|A ⊙ FD(∇_A L)|` of the unrefined pass.
//!
//! The prediction pass treats `S` as a constant gate input, so the
//! finite-difference objective holds that input at its base-point value
//! while the regularizer's `S` is recomputed at every probe. Instances whose
//! recorded kinks (relu, abs, clamp, max ties) lie within `kink_margin` of a
//! branch switch are redrawn, since central differences are meaningless there.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dataio::{GraphRecord, Label, RecordMeta};
use crate::detector::network::{self, ATTENTION_LEAF, HIDDEN_LEAF};
use crate::detector::{
    forward_full, DetectorConfig, DetectorError, DetectorParams, DropoutMasks, ForwardSpec, SensitivityTarget,
};
use crate::engine::fd::{central_difference_at, max_relative_error};
use crate::engine::{EngineError, Tape, Tensor};
use crate::refine::compute_sensitivity;
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("trial {trial}: no kink-free instance after {attempts} draws")]
    NoSmoothInstance { trial: usize, attempts: usize },
}

impl From<EngineError> for VerifyError {
    fn from(e: EngineError) -> Self {
        VerifyError::Detector(e.into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteConfig {
    pub trials: usize,
    pub sensitivity_trials: usize,
    pub seed: u64,
    pub eps: f64,
    /// Parameter coordinates probed per tensor and trial.
    pub coords_per_tensor: usize,
    pub first_order_tol: f64,
    pub second_order_tol: f64,
    pub sensitivity_tol: f64,
    /// Minimum distance of every active kink input from its kink.
    pub kink_margin: f64,
    pub max_attempts: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            trials: 20,
            sensitivity_trials: 10,
            seed: 9,
            eps: 1e-5,
            coords_per_tensor: 16,
            first_order_tol: 1e-5,
            second_order_tol: 1e-4,
            sensitivity_tol: 1e-4,
            kink_margin: 1e-4,
            max_attempts: 200,
        }
    }
}

/// Worst relative error of one named check across all trials.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckSummary {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
}

impl CheckSummary {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckSummary>,
    /// Instances redrawn because a kink was too close.
    pub redraws: usize,
    #[serde(serialize_with = "secs")]
    pub elapsed: Duration,
}

fn secs<S: serde::Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(d.as_secs_f64())
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckSummary::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckSummary> {
        self.checks.iter().filter(|c| !c.passed())
    }

    /// Worst check among those whose name starts with `prefix`.
    pub fn worst(&self, prefix: &str) -> Option<&CheckSummary> {
        self.checks
            .iter()
            .filter(|c| c.name.starts_with(prefix))
            .max_by(|a, b| (a.max_rel_error / a.tolerance).total_cmp(&(b.max_rel_error / b.tolerance)))
    }
}

#[derive(Default)]
struct Accumulator {
    checks: BTreeMap<String, CheckSummary>,
}

impl Accumulator {
    fn add(&mut self, name: String, err: f64, tolerance: f64, coordinates: usize) {
        let e = self.checks.entry(name.clone()).or_insert(CheckSummary {
            name,
            max_rel_error: 0.0,
            tolerance,
            coordinates: 0,
        });
        // NaN errors must surface as failures.
        if err.is_nan() || err > e.max_rel_error {
            e.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
        }
        e.coordinates += coordinates;
    }

    fn merge(&mut self, other: Accumulator) {
        for (_, c) in other.checks {
            self.add(c.name, c.max_rel_error, c.tolerance, c.coordinates);
        }
    }
}

/// Random record with causal-softmax attention and a random class label.
pub fn random_record<R: Rng>(l: usize, d: usize, rng: &mut R) -> GraphRecord {
    let hidden = Tensor::from_fn(l, d, |_, _| StandardNormal.sample(rng));
    let mut attention = Tensor::zeros(l, l);
    for i in 0..l {
        let e: Vec<f64> = (0..=i).map(|_| rng.random_range(-1.5..1.5f64).exp()).collect();
        let z: f64 = e.iter().sum();
        for (j, x) in e.iter().enumerate() {
            attention.set(i, j, x / z);
        }
    }
    GraphRecord {
        sample_id: format!("gradcheck-{l}x{d}"),
        tokens: (0..l).map(|i| format!("t{i}")).collect(),
        hidden,
        attention,
        label: Label::from_class(rng.random_range(0..2)),
        meta: RecordMeta {
            model_id: "gradcheck".into(),
            layer_index: 0,
        },
    }
}

/// Default-architecture parameters with every entry (biases and gate
/// scale/offset included) jittered, so no coordinate sits at a special value.
pub fn random_params<R: Rng>(d: usize, seed: u64, rng: &mut R) -> DetectorParams {
    let config = DetectorConfig {
        seed,
        ..DetectorConfig::with_input_dim(d)
    };
    let mut params = DetectorParams::init(&config);
    for (_, t) in params.named_mut() {
        for x in t.data_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *x += 0.1 * n;
        }
    }
    params
}

struct Instance {
    record: GraphRecord,
    params: DetectorParams,
    masks: Option<DropoutMasks>,
}

fn draw_instance(seed: u64, trial: usize, attempt: usize, with_dropout: bool, max_l: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, "gradcheck", trial as u64), "attempt", attempt as u64));
    let l = rng.random_range(2..=max_l);
    let d = rng.random_range(3..=8);
    let record = random_record(l, d, &mut rng);
    let params = random_params(d, rng.random(), &mut rng);
    let masks = with_dropout.then(|| DropoutMasks::sample(&params.config, l, &mut rng));
    Instance { record, params, masks }
}

fn full_loss(inst: &Instance, record: &GraphRecord, params: &DetectorParams, frozen: &Tensor) -> Result<f64, VerifyError> {
    let spec = ForwardSpec {
        frozen_gate_input: Some(frozen),
        ..ForwardSpec::train(inst.masks.as_ref())
    };
    let out = forward_full(record, params, spec)?;
    Ok(out.loss.expect("loss requested"))
}

/// `lambda ||S||_F^2` with `S` from a fresh first-order pass.
fn regularizer(record: &GraphRecord, params: &DetectorParams) -> Result<f64, VerifyError> {
    let s = compute_sensitivity(record, params, SensitivityTarget::TrueLabel)?;
    Ok(params.config.lambda * s.0.frobenius_sq())
}

/// Cross-entropy of the unrefined pass, its tape kept for kink inspection.
fn pass1_loss(record: &GraphRecord, params: &DetectorParams) -> Result<(f64, Tape), VerifyError> {
    let mut tape = Tape::new();
    let bound = network::bind(&mut tape, record, params)?;
    let edges = tape.mask_mul(bound.a, Arc::new(Tensor::causal_mask(record.len())))?;
    let out = network::backbone(&mut tape, &bound, edges, None)?;
    let class = record.label.class().expect("verification records are labelled");
    let ce = tape.softmax_cross_entropy(out.logits, class)?;
    let v = tape.value(ce).item();
    Ok((v, tape))
}

fn sampled_coords(len: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= n {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, n).into_vec();
        v.sort_unstable();
        v
    }
}

fn gradient_trial(cfg: &SuiteConfig, trial: usize) -> Result<(Accumulator, usize), VerifyError> {
    let mut redraws = 0;
    let (inst, mut fwd) = loop {
        if redraws >= cfg.max_attempts {
            return Err(VerifyError::NoSmoothInstance { trial, attempts: redraws });
        }
        let inst = draw_instance(cfg.seed, trial, redraws, trial % 2 == 1, 6);
        let fwd = forward_full(&inst.record, &inst.params, ForwardSpec::train(inst.masks.as_ref()))?;
        if fwd.graph.tape.min_active_kink_distance() >= cfg.kink_margin {
            break (inst, fwd);
        }
        redraws += 1;
    };
    let grads = fwd.gradients()?;
    let frozen = fwd.sensitivity.0.clone();
    let mut acc = Accumulator::default();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "gradcheck-coords", trial as u64));

    // Full loss with respect to H and A, every coordinate.
    let h = &inst.record.hidden;
    let all: Vec<usize> = (0..h.len()).collect();
    let numeric = central_difference_at(
        |p: &Tensor| {
            let mut r = inst.record.clone();
            r.hidden = p.clone();
            full_loss(&inst, &r, &inst.params, &frozen)
        },
        h,
        cfg.eps,
        &all,
    )?;
    acc.add("loss/H".into(), max_relative_error(grads[HIDDEN_LEAF].data(), &numeric), cfg.first_order_tol, all.len());

    let a = &inst.record.attention;
    let all: Vec<usize> = (0..a.len()).collect();
    let numeric = central_difference_at(
        |p: &Tensor| {
            let mut r = inst.record.clone();
            r.attention = p.clone();
            full_loss(&inst, &r, &inst.params, &frozen)
        },
        a,
        cfg.eps,
        &all,
    )?;
    acc.add("loss/A".into(), max_relative_error(grads[ATTENTION_LEAF].data(), &numeric), cfg.first_order_tol, all.len());

    // Full loss and the regularizer alone with respect to each parameter tensor.
    let reg_grads = {
        let mut tape = Tape::new();
        let bound = network::bind(&mut tape, &inst.record, &inst.params)?;
        let s = network::sensitivity_pass(&mut tape, &inst.record, &bound, &inst.params, SensitivityTarget::TrueLabel)?;
        let fro = tape.frobenius_sq(s.attached)?;
        let reg = tape.scale(fro, inst.params.config.lambda)?;
        tape.backward(reg)?
    };
    for (name, t) in inst.params.named() {
        let coords = sampled_coords(t.len(), cfg.coords_per_tensor, &mut rng);
        let with = |p: &Tensor| {
            let mut params = inst.params.clone();
            *params.get_mut(&name).expect("known name") = p.clone();
            params
        };
        let numeric = central_difference_at(|p: &Tensor| full_loss(&inst, &inst.record, &with(p), &frozen), t, cfg.eps, &coords)?;
        let analytic: Vec<f64> = coords.iter().map(|&k| grads[&name].data()[k]).collect();
        acc.add(format!("loss/{name}"), max_relative_error(&analytic, &numeric), cfg.first_order_tol, coords.len());

        let numeric = central_difference_at(|p: &Tensor| regularizer(&inst.record, &with(p)), t, cfg.eps, &coords)?;
        let analytic: Vec<f64> = coords.iter().map(|&k| reg_grads[&name].data()[k]).collect();
        acc.add(format!("reg/{name}"), max_relative_error(&analytic, &numeric), cfg.second_order_tol, coords.len());
    }
    Ok((acc, redraws))
}

fn sensitivity_trial(cfg: &SuiteConfig, trial: usize) -> Result<(Accumulator, usize), VerifyError> {
    let mut redraws = 0;
    let inst = loop {
        if redraws >= cfg.max_attempts {
            return Err(VerifyError::NoSmoothInstance { trial, attempts: redraws });
        }
        let inst = draw_instance(derive_seed(cfg.seed, "sensitivity", 0), trial, redraws, false, 5);
        if pass1_loss(&inst.record, &inst.params)?.1.min_active_kink_distance() >= cfg.kink_margin {
            break inst;
        }
        redraws += 1;
    };
    let s = compute_sensitivity(&inst.record, &inst.params, SensitivityTarget::TrueLabel)?;
    let a = &inst.record.attention;
    let l = a.rows();
    let unmasked: Vec<usize> = (0..l).flat_map(|i| (0..=i).map(move |j| i * l + j)).collect();
    let fd = central_difference_at(
        |p: &Tensor| {
            let mut r = inst.record.clone();
            r.attention = p.clone();
            Ok::<_, VerifyError>(pass1_loss(&r, &inst.params)?.0)
        },
        a,
        cfg.eps,
        &unmasked,
    )?;
    let mut expected = vec![0.0; l * l];
    for (&k, g) in unmasked.iter().zip(&fd) {
        expected[k] = (a.data()[k] * g).abs();
    }
    let mut acc = Accumulator::default();
    acc.add("sensitivity".into(), max_relative_error(s.0.data(), &expected), cfg.sensitivity_tol, l * l);
    Ok((acc, redraws))
}

fn collect<F>(trials: usize, f: F) -> Result<(Accumulator, usize), VerifyError>
where
    F: Fn(usize) -> Result<(Accumulator, usize), VerifyError> + Sync,
{
    let results: Vec<_> = (0..trials).into_par_iter().map(&f).collect::<Result<_, _>>()?;
    let mut acc = Accumulator::default();
    let mut redraws = 0;
    for (a, r) in results {
        acc.merge(a);
        redraws += r;
    }
    Ok((acc, redraws))
}

/// Full-loss and regularizer gradient checks over `cfg.trials` instances.
pub fn gradient_suite(cfg: &SuiteConfig) -> Result<SuiteReport, VerifyError> {
    let start = Instant::now();
    let (acc, redraws) = collect(cfg.trials, |t| gradient_trial(cfg, t))?;
    Ok(SuiteReport {
        checks: acc.checks.into_values().collect(),
        redraws,
        elapsed: start.elapsed(),
    })
}

/// `S` against finite differences of the unrefined-pass loss over `cfg.sensitivity_trials` records.
pub fn sensitivity_oracle(cfg: &SuiteConfig) -> Result<SuiteReport, VerifyError> {
    let start = Instant::now();
    let (acc, redraws) = collect(cfg.sensitivity_trials, |t| sensitivity_trial(cfg, t))?;
    Ok(SuiteReport {
        checks: acc.checks.into_values().collect(),
        redraws,
        elapsed: start.elapsed(),
    })
}

/// Both suites, merged into one report.
pub fn full_suite(cfg: &SuiteConfig) -> Result<SuiteReport, VerifyError> {
    let g = gradient_suite(cfg)?;
    let s = sensitivity_oracle(cfg)?;
    let mut checks = g.checks;
    checks.extend(s.checks);
    Ok(SuiteReport {
        checks,
        redraws: g.redraws + s.redraws,
        elapsed: g.elapsed + s.elapsed,
    })
}
