// SPDX-License-Identifier: MIT OR Apache-2.0

use causalgaze::detector::{DetectorConfig, DetectorParams, SensitivityTarget};
use causalgaze::engine::Tensor;
use causalgaze::refine::{compute_sensitivity, gate, refine_edges, GateParams, SensitivityMatrix};
use causalgaze::verify::{random_params, random_record, sensitivity_oracle, SuiteConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn masked_attention(l: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut a = Tensor::random_uniform(l, l, 0.0, 1.0, rng).mul(&Tensor::causal_mask(l));
    // Sprinkle exact zeros below the diagonal too.
    for i in 0..l {
        for j in 0..i {
            if rng.random_bool(0.2) {
                a.set(i, j, 0.0);
            }
        }
    }
    a
}

#[test]
fn mask_and_attenuation_bounds_hold_over_1000_evaluations() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let l = rng.random_range(1..8);
        let a = masked_attention(l, &mut rng);
        let s = SensitivityMatrix(Tensor::random_uniform(l, l, 0.0, 2.0, &mut rng).mul(&a.map(|x| (x != 0.0) as u8 as f64)));
        let mut gp = GateParams::init(2, 16, &mut rng);
        gp.w1 = gp.w1.map(|x| x * 3.0);
        let (ga, gb) = (rng.random_range(0.0..2.0), rng.random_range(0.0..1.0));
        gp.a = Tensor::scalar(ga);
        gp.b = Tensor::scalar(gb);
        let g = gate(&a, Some(&s), &gp).unwrap();
        let r = refine_edges(&a, &g).unwrap();
        for i in 0..l {
            for j in 0..l {
                let v = r.0.get(i, j);
                if j > i {
                    assert_eq!(v, 0.0);
                }
                assert!(v >= 0.0);
                assert!(v <= (ga + gb) * a.get(i, j) + 1e-15, "{v} vs {}", (ga + gb) * a.get(i, j));
                if a.get(i, j) == 0.0 {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }
}

#[test]
fn zero_gate_network_is_exactly_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let l = rng.random_range(1..7);
        let a = masked_attention(l, &mut rng);
        let s = SensitivityMatrix(Tensor::random_uniform(l, l, 0.0, 5.0, &mut rng));
        let g = gate(&a, Some(&s), &GateParams::zeroed(2, 16, 1.0, 0.0)).unwrap();
        assert!(g.data().iter().all(|&x| x == 0.5));
    }
}

#[test]
fn sensitivity_is_zero_where_attention_is_zero_and_above_the_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let l = rng.random_range(2..7);
        let mut rec = random_record(l, 4, &mut rng);
        rec.attention.set(l - 1, 0, 0.0);
        let p = random_params(4, rng.random(), &mut rng);
        let s = compute_sensitivity(&rec, &p, SensitivityTarget::TrueLabel).unwrap();
        assert!(s.0.data().iter().all(|&x| x >= 0.0 && x.is_finite()));
        assert_eq!(s.0.get(l - 1, 0), 0.0);
        for i in 0..l {
            for j in i + 1..l {
                assert_eq!(s.0.get(i, j), 0.0);
            }
        }
    }
}

#[test]
fn sensitivity_ignores_values_above_the_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rec = random_record(4, 3, &mut rng);
    let p = random_params(3, 1, &mut rng);
    let base = compute_sensitivity(&rec, &p, SensitivityTarget::TrueLabel).unwrap();
    let mut leaked = rec.clone();
    leaked.attention.set(0, 3, 0.7);
    leaked.attention.set(1, 2, 0.2);
    let s = compute_sensitivity(&leaked, &p, SensitivityTarget::TrueLabel).unwrap();
    assert_eq!(s, base);
}

#[test]
fn loss_constant_in_attention_gives_zero_sensitivity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rec = random_record(1, 3, &mut rng);
    let mut p = DetectorParams::init(&DetectorConfig {
        gat_dims: vec![128, 128],
        ..DetectorConfig::with_input_dim(3)
    });
    for l in &mut p.gat_layers {
        for h in &mut l.heads {
            *h = Tensor::zeros(h.rows(), h.cols());
        }
    }
    let s = compute_sensitivity(&rec, &p, SensitivityTarget::TrueLabel).unwrap();
    assert_eq!(s.0.data(), &[0.0]);
}

#[test]
fn unknown_label_cannot_target_the_truth() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut rec = random_record(3, 3, &mut rng);
    rec.label = causalgaze::dataio::Label::Unknown;
    let p = random_params(3, 0, &mut rng);
    assert!(compute_sensitivity(&rec, &p, SensitivityTarget::TrueLabel).is_err());
    assert!(compute_sensitivity(&rec, &p, SensitivityTarget::Predicted).is_ok());
    assert!(compute_sensitivity(&rec, &p, SensitivityTarget::HallucinationLogit).is_ok());
}

#[test]
fn sensitivity_matches_finite_difference_oracle() {
    let report = sensitivity_oracle(&SuiteConfig {
        sensitivity_trials: 3,
        seed: 21,
        ..SuiteConfig::default()
    })
    .unwrap();
    assert!(report.passed(), "{:?}", report.checks);
}
