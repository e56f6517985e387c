//! Adversarial misreports and ex-post regret.
//!
//! For every profile and every bidder `i`, a scenario replaces row `i` of
//! the truthful bids with that bidder's misreport. All scenarios of a
//! batch are evaluated in one forward pass of shape `[batch * n, n, k]`.

use caforge_tensor::{Adam, Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::auction::{AuctionConfig, Distribution, SupportBox};
use crate::error::{Error, Result};
use crate::mechanism::{bind_frozen, Mechanism};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MisreportDomain {
    /// Clamp to the support of the bidder's value distribution.
    #[default]
    Support,
    /// Clamp at zero only.
    Nonnegative,
}

impl std::str::FromStr for MisreportDomain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "support" => Ok(MisreportDomain::Support),
            "nonnegative" => Ok(MisreportDomain::Nonnegative),
            other => Err(Error::config(format!("unknown misreport domain {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MisreportConfig {
    pub steps: usize,
    pub lr: f64,
    pub init_noise: f64,
    pub domain: MisreportDomain,
}

impl Default for MisreportConfig {
    fn default() -> Self {
        MisreportConfig {
            steps: 50,
            lr: 0.1,
            init_noise: 0.1,
            domain: MisreportDomain::Support,
        }
    }
}

impl MisreportConfig {
    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn bounds(&self, distribution: &Distribution, config: &AuctionConfig) -> Result<SupportBox> {
        match self.domain {
            MisreportDomain::Support => distribution.support(config),
            MisreportDomain::Nonnegative => Ok(SupportBox::nonnegative(config)),
        }
    }
}

/// Truth plus uniform noise, projected onto `bounds`.
pub fn initial_misreports(truth: &Tensor, bounds: &SupportBox, noise: f64, rng: &mut impl Rng) -> Tensor {
    let mut init = truth.clone();
    if noise > 0.0 {
        for x in init.data_mut() {
            *x += rng.gen_range(-noise..noise);
        }
    }
    bounds.project(init.data_mut());
    init
}

fn eye(n: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = 1.0;
    }
    t
}

/// `[batch, n(scenario), n, k]` bids where scenario i carries row i of
/// `misreports` and the truthful rows elsewhere.
fn scenario_bids(g: &mut Graph, truth: Var, misreports: Var) -> Result<Var> {
    let [batch, n, k] = g.shape(truth)[..] else {
        return Err(Error::config("bids must be [batch, n, k]"));
    };
    let diag = eye(n).reshape(vec![1, n, n, 1])?;
    let off = diag.map(|x| 1.0 - x);
    let diag = g.constant(diag);
    let off = g.constant(off);
    let t4 = g.reshape(truth, &[batch, 1, n, k])?;
    let m4 = g.reshape(misreports, &[batch, n, 1, k])?;
    let keep = g.mul(t4, off)?;
    let swap = g.mul(m4, diag)?;
    Ok(g.add(keep, swap)?)
}

/// Utility of bidder i in scenario i, `[batch, n]`, from allocations
/// `[batch, n, n, k]` and payments `[batch, n, n]`.
fn own_scenario_utility(g: &mut Graph, truth: Var, z: Var, p: Var) -> Result<Var> {
    let [batch, n, k] = g.shape(truth)[..] else {
        return Err(Error::config("bids must be [batch, n, k]"));
    };
    let t4 = g.reshape(truth, &[batch, 1, n, k])?;
    let value = g.mul(z, t4)?;
    let value = g.sum_axis(value, 3, false)?;
    let u = g.sub(value, p)?;
    let diag = g.constant(eye(n));
    let own = g.mul(u, diag)?;
    Ok(g.sum_axis(own, 2, false)?)
}

/// Optimizes misreports for a batch with Adam ascent on each bidder's
/// utility, others bidding truthfully, starting from `init`. Mechanism
/// parameters are frozen.
pub fn optimize_from(
    mech: &dyn Mechanism,
    truth: &Tensor,
    init: Tensor,
    bounds: &SupportBox,
    cfg: &MisreportConfig,
) -> Result<Tensor> {
    let mut mis = init;
    if cfg.steps == 0 {
        return Ok(mis);
    }
    let [batch, n, k] = truth.shape()[..] else {
        return Err(Error::config("bids must be [batch, n, k]"));
    };
    let mut adam = Adam::new(mis.numel(), cfg.lr);
    let mut grads = vec![0.0; mis.numel()];
    for _ in 0..cfg.steps {
        let mut g = Graph::new();
        let params = bind_frozen(mech, &mut g);
        let t = g.constant(truth.clone());
        let m = g.param(mis.clone());
        let bids = scenario_bids(&mut g, t, m)?;
        let flat = g.reshape(bids, &[batch * n, n, k])?;
        let out = mech.forward(&mut g, &params, flat)?;
        let z = g.reshape(out.allocation, &[batch, n, n, k])?;
        let p = g.reshape(out.payments, &[batch, n, n])?;
        let u = own_scenario_utility(&mut g, t, z, p)?;
        let objective = g.sum(u);
        let gr = g.backward(objective)?;
        match gr.get(m) {
            Some(gm) => {
                for (d, s) in grads.iter_mut().zip(gm.data()) {
                    *d = -s;
                }
            }
            None => grads.fill(0.0),
        }
        adam.step(mis.data_mut(), &grads);
        bounds.project(mis.data_mut());
    }
    Ok(mis)
}

/// Draws the initial misreports from `rng`, then optimizes.
pub fn misreport_optimize(
    mech: &dyn Mechanism,
    truth: &Tensor,
    bounds: &SupportBox,
    cfg: &MisreportConfig,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let init = initial_misreports(truth, bounds, cfg.init_noise, rng);
    optimize_from(mech, truth, init, bounds, cfg)
}

/// Graph nodes for the outer objective of one batch.
#[derive(Clone, Copy, Debug)]
pub struct RegretTerms {
    /// Mean total payment, scalar.
    pub revenue: Var,
    /// Mean clipped utility gain per bidder, `[n]`.
    pub regret: Var,
    /// `[batch, n]`.
    pub truthful_utility: Var,
    /// `[batch, n, k]`.
    pub truthful_allocation: Var,
    /// `[batch, n]`.
    pub truthful_payments: Var,
}

/// Evaluates the truthful profile and all misreport scenarios in one
/// forward pass.
pub fn regret_terms(
    g: &mut Graph,
    mech: &dyn Mechanism,
    params: &[Var],
    truth: Var,
    misreports: Var,
) -> Result<RegretTerms> {
    let [batch, n, k] = g.shape(truth)[..] else {
        return Err(Error::config("bids must be [batch, n, k]"));
    };
    let scenarios = scenario_bids(g, truth, misreports)?;
    let t4 = g.reshape(truth, &[batch, 1, n, k])?;
    let stacked = g.concat(&[t4, scenarios], 1)?;
    let flat = g.reshape(stacked, &[batch * (n + 1), n, k])?;
    let out = mech.forward(g, params, flat)?;
    let z = g.reshape(out.allocation, &[batch, n + 1, n, k])?;
    let p = g.reshape(out.payments, &[batch, n + 1, n])?;

    let z0 = g.select(z, 1, &[0])?;
    let z0 = g.reshape(z0, &[batch, n, k])?;
    let p0 = g.select(p, 1, &[0])?;
    let p0 = g.reshape(p0, &[batch, n])?;
    let value = g.mul(z0, truth)?;
    let value = g.sum_axis(value, 2, false)?;
    let u_truth = g.sub(value, p0)?;

    let rest: Vec<usize> = (1..=n).collect();
    let zs = g.select(z, 1, &rest)?;
    let ps = g.select(p, 1, &rest)?;
    let u_mis = own_scenario_utility(g, truth, zs, ps)?;

    let gain = g.sub(u_mis, u_truth)?;
    let gain = g.relu(gain);
    let regret = g.mean_axis(gain, 0, false)?;
    let total = g.sum(p0);
    let revenue = g.scale(total, 1.0 / batch as f64);
    Ok(RegretTerms {
        revenue,
        regret,
        truthful_utility: u_truth,
        truthful_allocation: z0,
        truthful_payments: p0,
    })
}

/// Per-bidder regret of a batch for already optimized misreports.
pub fn regret(mech: &dyn Mechanism, truth: &Tensor, misreports: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let params = bind_frozen(mech, &mut g);
    let t = g.constant(truth.clone());
    let m = g.constant(misreports.clone());
    let terms = regret_terms(&mut g, mech, &params, t, m)?;
    Ok(g.value(terms.regret).data().to_vec())
}
