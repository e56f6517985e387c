//! Adaptive balance between the revenue and regret terms of the outer loss.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerParams {
    /// Step size of the weight update.
    pub lr: f64,
    /// Scale inside the tanh squashing.
    pub rho: f64,
    /// Revenue sensitivity of the regret budget.
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for SchedulerParams {
    fn default() -> Self {
        SchedulerParams {
            lr: 0.01,
            rho: 2.0,
            alpha: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Scheduler state. `raw` accumulates Adam steps; the effective regret
/// weight is `max(tanh(raw / rho), 0)` and the revenue weight its
/// complement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightScheduler {
    pub raw: f64,
    pub w_rgt: f64,
    pub w_rev: f64,
    pub m: f64,
    pub v: f64,
    pub t: u64,
}

impl WeightScheduler {
    pub fn new(initial: f64, params: &SchedulerParams) -> Self {
        let w_rgt = squash(initial, params.rho);
        WeightScheduler {
            raw: initial,
            w_rgt,
            w_rev: 1.0 - w_rgt,
            m: 0.0,
            v: 0.0,
            t: 0,
        }
    }

    /// Log-gap between observed regret and the revenue-adjusted target;
    /// positive when regret is over budget.
    pub fn gradient(rgt: f64, rev: f64, target: f64, alpha: f64) -> f64 {
        rgt.max(1e-12).ln() - target.ln() - (1.0 + alpha * rev).ln()
    }

    /// One update; returns the gradient signal used.
    pub fn update(&mut self, rgt: f64, rev: f64, target: f64, p: &SchedulerParams) -> f64 {
        let g = Self::gradient(rgt, rev, target, p.alpha);
        self.m = p.beta1 * self.m + (1.0 - p.beta1) * g;
        self.v = p.beta2 * self.v + (1.0 - p.beta2) * g * g;
        let power = (self.t + 1) as i32;
        let m_hat = self.m / (1.0 - p.beta1.powi(power));
        let v_hat = self.v / (1.0 - p.beta2.powi(power));
        self.raw += p.lr * m_hat / (v_hat.sqrt() + p.eps);
        self.w_rgt = squash(self.raw, p.rho);
        self.w_rev = 1.0 - self.w_rgt;
        self.t += 1;
        g
    }
}

fn squash(raw: f64, rho: f64) -> f64 {
    (raw / rho).tanh().max(0.0)
}

/// Geometric interpolation from `start` to `end` over the first two thirds
/// of training, constant afterwards.
pub fn anneal_target(t: usize, total: usize, start: f64, end: f64) -> f64 {
    let horizon = 2 * total / 3;
    if horizon == 0 {
        return end;
    }
    let frac = (t as f64 / horizon as f64).min(1.0);
    start * (end / start).powf(frac)
}
