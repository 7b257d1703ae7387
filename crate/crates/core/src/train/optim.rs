// SPDX-License-Identifier: MIT OR Apache-2.0

//! AdamW with bias correction and decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::detector::DetectorParams;
use crate::engine::{Gradients, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter, plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One AdamW update of a flat parameter slice, with `t` the (already
/// incremented) step number:
///
/// `m ← β1 m + (1−β1) g`, `v ← β2 v + (1−β2) g²`,
/// `θ ← θ − lr (m̂ / (√v̂ + eps) + wd θ)` with `m̂ = m/(1−β1^t)`, `v̂ = v/(1−β2^t)`.
pub fn adamw_update(theta: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, cfg: &AdamWConfig) {
    let t = i32::try_from(t).unwrap_or(i32::MAX);
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * theta[i]);
    }
}

/// Applies one AdamW step to every non-frozen parameter. All gradients are
/// checked before anything is modified; a non-finite entry aborts the step
/// and names the parameter.
pub fn adamw_step(
    params: &mut DetectorParams,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<(), TrainError> {
    let names: Vec<String> = params
        .named()
        .into_iter()
        .map(|(n, _)| n)
        .filter(|n| !params.is_frozen(n))
        .collect();
    for name in &names {
        let g = grads.get(name).ok_or_else(|| TrainError::MissingGradient(name.clone()))?;
        let p = params.get(name).expect("name taken from params");
        if g.shape() != p.shape() {
            return Err(TrainError::MissingGradient(name.clone()));
        }
        if !g.all_finite() {
            return Err(TrainError::NonFinite { param: name.clone() });
        }
    }
    state.t += 1;
    for name in names {
        let g = &grads[&name];
        let p = params.get_mut(&name).expect("name taken from params");
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
        let v = state.v.entry(name).or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
        adamw_update(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), state.t, lr, cfg);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let (mut th, mut m, mut v) = ([0.7, -2.0], [0.0; 2], [0.0; 2]);
        adamw_update(&mut th, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, &cfg);
        assert_eq!(th, [0.7, -2.0]);
        assert_eq!((m, v), ([0.0; 2], [0.0; 2]));
    }

    #[test]
    fn zero_gradient_with_decay_shrinks() {
        let cfg = AdamWConfig::default();
        let (mut th, mut m, mut v) = ([3.0], [0.0], [0.0]);
        adamw_update(&mut th, &[0.0], &mut m, &mut v, 1, 0.1, &cfg);
        assert_eq!(th[0], 3.0 - 0.1 * (0.01 * 3.0));
        assert!((th[0] - 3.0 * (1.0 - 0.001)).abs() < 1e-15);
    }
}
