// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-epoch cosine annealing with warm restarts.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    /// Length of the first cycle in epochs.
    pub t0: usize,
    /// Cycle-length multiplier after each restart.
    pub t_mult: usize,
    pub eta_min: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            t0: 10,
            t_mult: 2,
            eta_min: 1e-6,
        }
    }
}

/// Learning rate at `epoch`: cycle `i` has length `T_i = T0 * Tmult^i`; at
/// in-cycle position `T_cur` the rate is
/// `eta_min + (lr0 - eta_min) * (1 + cos(pi * T_cur / T_i)) / 2`.
/// The first epoch of every cycle returns `lr0` exactly.
pub fn cosine_warm_restart_lr(epoch: usize, lr0: f64, cfg: &SchedulerConfig) -> f64 {
    let mut t_i = cfg.t0.max(1);
    let mut t_cur = epoch;
    while t_cur >= t_i {
        t_cur -= t_i;
        t_i = t_i.saturating_mul(cfg.t_mult.max(1));
    }
    if t_cur == 0 {
        return lr0;
    }
    let phase = (std::f64::consts::PI * t_cur as f64 / t_i as f64).cos();
    // Grouped so that the midpoint (cos = 6e-17) rounds to (lr0 + eta_min) / 2 exactly.
    let lr = ((lr0 + cfg.eta_min) + (lr0 - cfg.eta_min) * phase) / 2.0;
    lr.clamp(cfg.eta_min, lr0)
}
