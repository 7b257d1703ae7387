// SPDX-License-Identifier: MIT OR Apache-2.0

use causalgaze::detector::{forward_full, DetectorError, ForwardSpec};
use causalgaze::engine::fd::{central_difference, max_relative_error};
use causalgaze::engine::{Tape, Tensor};
use causalgaze::verify::{random_params, random_record};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn cross_entropy_of_uniform_logits_is_ln_two() {
    let mut tape = Tape::new();
    let z = tape.leaf("z", Tensor::row(&[0.0, 0.0])).unwrap();
    let ce = tape.softmax_cross_entropy(z, 0).unwrap();
    assert!((tape.value(ce).get(0, 0) - std::f64::consts::LN_2).abs() < 1e-15);
    let g = tape.backward(ce).unwrap();
    assert_eq!(g["z"].data(), &[-0.5, 0.5]);
}

/// `||dL/dA||_F^2` of the full detector loss, with the gate's sensitivity input held at `frozen`.
fn grad_norm_sq(record: &causalgaze::dataio::GraphRecord, params: &causalgaze::detector::DetectorParams, frozen: &Tensor) -> Result<f64, DetectorError> {
    let spec = ForwardSpec {
        frozen_gate_input: Some(frozen),
        ..ForwardSpec::train(None)
    };
    let mut graph = forward_full(record, params, spec)?.graph;
    let loss = graph.loss.expect("loss requested");
    Ok(graph.tape.backward(loss)?["A"].frobenius_sq())
}

#[test]
fn second_order_gradient_of_full_loss_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut checked = 0;
    while checked < 3 {
        let record = random_record(3, rng.random_range(3..6), &mut rng);
        let params = random_params(record.dim(), rng.random(), &mut rng);
        let out = forward_full(&record, &params, ForwardSpec::train(None)).unwrap();
        if out.graph.tape.min_active_kink_distance() < 1e-4 {
            continue;
        }
        let frozen = out.sensitivity.0.clone();
        let mut graph = out.graph;
        let loss = graph.loss.unwrap();
        let analytic = graph
            .tape
            .backward_of_backward(loss, |t, g| {
                let sq = t.mul(g["A"], g["A"])?;
                t.sum_all(sq)
            })
            .unwrap()["A"]
            .clone();
        let numeric = central_difference(
            |a: &Tensor| {
                let mut r = record.clone();
                r.attention = a.clone();
                grad_norm_sq(&r, &params, &frozen)
            },
            &record.attention,
            1e-5,
        )
        .unwrap();
        let err = max_relative_error(analytic.data(), numeric.data());
        assert!(err <= 1e-4, "relative error {err}");
        checked += 1;
    }
}

#[test]
fn first_order_gradient_of_full_loss_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut checked = 0;
    while checked < 3 {
        let record = random_record(4, 6, &mut rng);
        let params = random_params(6, rng.random(), &mut rng);
        let mut out = forward_full(&record, &params, ForwardSpec::train(None)).unwrap();
        if out.graph.tape.min_active_kink_distance() < 1e-4 {
            continue;
        }
        let frozen = out.sensitivity.0.clone();
        let analytic = out.gradients().unwrap();
        let numeric = central_difference(
            |a: &Tensor| {
                let mut r = record.clone();
                r.attention = a.clone();
                let spec = ForwardSpec {
                    frozen_gate_input: Some(&frozen),
                    ..ForwardSpec::train(None)
                };
                Ok::<_, DetectorError>(forward_full(&r, &params, spec)?.loss.unwrap())
            },
            &record.attention,
            1e-5,
        )
        .unwrap();
        let err = max_relative_error(analytic["A"].data(), numeric.data());
        assert!(err <= 1e-6, "relative error {err}");
        checked += 1;
    }
}
