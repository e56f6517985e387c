//! Test-time metrics: revenue, regret under long misreport optimization,
//! IR violations and feasibility slack.

use caforge_tensor::{Graph, Tensor};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::auction::{check_feasibility, SupportBox, ValuationProfile};
use crate::error::{Error, Result};
use crate::mechanism::{bind_frozen, Mechanism};
use crate::train::misreport::{initial_misreports, optimize_from, regret_terms, MisreportConfig};

/// Utilities below this count as IR violations.
pub const IR_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub misreport: MisreportConfig,
    /// Profiles per misreport batch.
    pub chunk: usize,
    /// Fan chunks out over the rayon pool.
    pub parallel: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            misreport: MisreportConfig::default().with_steps(1000),
            chunk: 250,
            parallel: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mechanism: String,
    pub samples: usize,
    pub revenue: f64,
    /// Per bidder.
    pub regret: Vec<f64>,
    pub regret_mean: f64,
    pub regret_max: f64,
    pub ir_violations: usize,
    pub min_utility: f64,
    pub feasibility_max_violation: f64,
    pub misreport_steps: usize,
}

#[derive(Clone, Debug)]
struct ChunkStats {
    count: usize,
    revenue_sum: f64,
    regret_sum: Vec<f64>,
    ir_violations: usize,
    min_utility: f64,
    max_violation: f64,
}

fn evaluate_chunk(
    mech: &dyn Mechanism,
    truth: &Tensor,
    init: Tensor,
    bounds: &SupportBox,
    cfg: &MisreportConfig,
) -> Result<ChunkStats> {
    let count = truth.shape()[0];
    let config = *mech.config();
    let per = config.bidders() * config.bundles();
    let mis = optimize_from(mech, truth, init, bounds, cfg)?;
    let mut g = Graph::new();
    let params = bind_frozen(mech, &mut g);
    let t = g.constant(truth.clone());
    let m = g.constant(mis);
    let terms = regret_terms(&mut g, mech, &params, t, m)?;
    let utilities = g.value(terms.truthful_utility).data();
    let z = g.value(terms.truthful_allocation).data();
    let max_violation = (0..count)
        .map(|b| check_feasibility(&z[b * per..(b + 1) * per], &config, 0.0).max_excess)
        .fold(0.0, f64::max);
    Ok(ChunkStats {
        count,
        revenue_sum: g.value(terms.revenue).item() * count as f64,
        regret_sum: g.value(terms.regret).data().iter().map(|r| r * count as f64).collect(),
        ir_violations: utilities.iter().filter(|&&u| u < -IR_TOLERANCE).count(),
        min_utility: utilities.iter().copied().fold(f64::INFINITY, f64::min),
        max_violation,
    })
}

/// Evaluates `mech` on `profiles`. Initial misreports are drawn from `rng`
/// up front, so the result does not depend on chunking order or threads.
pub fn evaluate(
    mech: &dyn Mechanism,
    profiles: &ValuationProfile,
    bounds: &SupportBox,
    opts: &EvalOptions,
    rng: &mut impl Rng,
) -> Result<EvalMetrics> {
    if profiles.config() != mech.config() {
        return Err(Error::config(format!(
            "mechanism is {} but profiles are {}",
            mech.config(),
            profiles.config()
        )));
    }
    if profiles.is_empty() {
        return Err(Error::config("no profiles to evaluate"));
    }
    let chunk = opts.chunk.max(1);
    let truth = profiles.to_tensor();
    let init = initial_misreports(&truth, bounds, opts.misreport.init_noise, rng);
    let n = mech.config().bidders();
    let per = n * mech.config().bundles();

    let starts: Vec<usize> = (0..profiles.len()).step_by(chunk).collect();
    let job = |&start: &usize| {
        let end = (start + chunk).min(profiles.len());
        let t = profiles.slice(start, end).to_tensor();
        let i = Tensor::new(t.shape().to_vec(), init.data()[start * per..end * per].to_vec())?;
        evaluate_chunk(mech, &t, i, bounds, &opts.misreport)
    };
    let stats: Vec<ChunkStats> = if opts.parallel {
        starts.par_iter().map(job).collect::<Result<_>>()?
    } else {
        starts.iter().map(job).collect::<Result<_>>()?
    };

    let total: usize = stats.iter().map(|s| s.count).sum();
    let mut regret = vec![0.0; n];
    let mut revenue = 0.0;
    for s in &stats {
        revenue += s.revenue_sum;
        for (r, x) in regret.iter_mut().zip(&s.regret_sum) {
            *r += x;
        }
    }
    let regret: Vec<f64> = regret.iter().map(|r| r / total as f64).collect();
    Ok(EvalMetrics {
        mechanism: mech.name().to_string(),
        samples: total,
        revenue: revenue / total as f64,
        regret_mean: regret.iter().sum::<f64>() / n as f64,
        regret_max: regret.iter().copied().fold(0.0, f64::max),
        regret,
        ir_violations: stats.iter().map(|s| s.ir_violations).sum(),
        min_utility: stats.iter().map(|s| s.min_utility).fold(f64::INFINITY, f64::min),
        feasibility_max_violation: stats.iter().map(|s| s.max_violation).fold(0.0, f64::max),
        misreport_steps: opts.misreport.steps,
    })
}
