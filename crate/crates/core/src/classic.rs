//! Exact baselines: VCG and affine maximizers over brute-force winner
//! determination.

use caforge_tensor::{Graph, Tensor, Var};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::auction::{enumerate_feasible_allocations, AuctionConfig, DeterministicAllocation, ValuationProfile};
use crate::error::{Error, Result};
use crate::mechanism::{check_bids, Mechanism, Outcome};

/// The feasible deterministic allocations of an auction, with the
/// (bidder, bundle) pairs each one assigns.
#[derive(Clone, Debug)]
pub struct WinnerDetermination {
    config: AuctionConfig,
    allocations: Vec<DeterministicAllocation>,
    assignments: Vec<Vec<(usize, usize)>>,
}

impl WinnerDetermination {
    pub fn new(config: &AuctionConfig) -> Result<Self> {
        let allocations = enumerate_feasible_allocations(config)?;
        let assignments = allocations
            .iter()
            .map(|a| {
                a.bundles
                    .iter()
                    .enumerate()
                    .filter_map(|(i, b)| b.map(|mask| (i, config.bundle_index(mask))))
                    .collect()
            })
            .collect();
        Ok(WinnerDetermination {
            config: *config,
            allocations,
            assignments,
        })
    }

    pub fn config(&self) -> &AuctionConfig {
        &self.config
    }

    pub fn allocations(&self) -> &[DeterministicAllocation] {
        &self.allocations
    }

    pub fn len(&self) -> usize {
        self.allocations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allocations.is_empty()
    }

    /// `out[a * n + i]` = value bidder i gets from allocation a.
    pub fn bidder_values(&self, values: &[f64], out: &mut Vec<f64>) {
        let (n, k) = (self.config.bidders(), self.config.bundles());
        out.clear();
        out.resize(self.len() * n, 0.0);
        for (a, pairs) in self.assignments.iter().enumerate() {
            for &(i, s) in pairs {
                out[a * n + i] = values[i * k + s];
            }
        }
    }

    /// Allocation classes keyed by the sorted multiset of bundle sizes; the
    /// class of each allocation plus the number of classes. Classes are
    /// numbered in order of first appearance.
    pub fn size_classes(&self) -> (Vec<usize>, usize) {
        let mut keys: Vec<Vec<usize>> = Vec::new();
        let mut class = Vec::with_capacity(self.len());
        for a in &self.allocations {
            let mut key: Vec<usize> = a.sizes().into_iter().filter(|&s| s > 0).collect();
            key.sort_unstable();
            let idx = keys.iter().position(|k| *k == key).unwrap_or_else(|| {
                keys.push(key);
                keys.len() - 1
            });
            class.push(idx);
        }
        let count = keys.len();
        (class, count)
    }
}

/// Winning allocation index and per-bidder payments.
#[derive(Clone, Debug, PartialEq)]
pub struct DeterministicOutcome {
    pub allocation: usize,
    pub payments: Vec<f64>,
}

/// Welfare-maximizing allocation with Clarke pivot payments. Ties go to the
/// earliest allocation in enumeration order.
pub fn vcg(values: &[f64], wd: &WinnerDetermination) -> DeterministicOutcome {
    let n = wd.config.bidders();
    let mut table = Vec::new();
    wd.bidder_values(values, &mut table);
    let totals: Vec<f64> = table.chunks(n).map(|row| row.iter().sum()).collect();
    let best = argmax(&totals);
    let payments = (0..n)
        .map(|i| {
            let others = |a: usize| totals[a] - table[a * n + i];
            let pivot = (0..wd.len()).map(others).fold(f64::NEG_INFINITY, f64::max);
            pivot - others(best)
        })
        .collect();
    DeterministicOutcome {
        allocation: best,
        payments,
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// How boosts are attached to allocations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoostFamily {
    /// One boost per class of allocations with the same multiset of bundle
    /// sizes, shared by all bidders.
    Ama,
    /// Bidder-specific boosts λ(i, size of i's bundle); receiving nothing
    /// carries no boost. An allocation's boost is the sum over bidders.
    Vvca,
}

impl BoostFamily {
    pub fn dimensions(&self, wd: &WinnerDetermination) -> usize {
        match self {
            BoostFamily::Ama => wd.size_classes().1,
            BoostFamily::Vvca => wd.config.bidders() * wd.config.items(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmaParams {
    pub family: BoostFamily,
    pub weights: Vec<f64>,
    pub boosts: Vec<f64>,
}

impl AmaParams {
    /// Unit weights and zero boosts, which reproduce VCG.
    pub fn unit(family: BoostFamily, wd: &WinnerDetermination) -> Self {
        AmaParams {
            family,
            weights: vec![1.0; wd.config.bidders()],
            boosts: vec![0.0; family.dimensions(wd)],
        }
    }

    pub fn validate(&self, wd: &WinnerDetermination) -> Result<()> {
        if self.weights.len() != wd.config.bidders() {
            return Err(Error::config(format!(
                "{} weights for {} bidders",
                self.weights.len(),
                wd.config.bidders()
            )));
        }
        if let Some(w) = self.weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(Error::config(format!("bidder weights must be positive, got {w}")));
        }
        let dims = self.family.dimensions(wd);
        if self.boosts.len() != dims {
            return Err(Error::config(format!(
                "{} boosts given, the {:?} family over this auction has {dims}",
                self.boosts.len(),
                self.family
            )));
        }
        Ok(())
    }

    /// Boost of every allocation, in enumeration order.
    pub fn boost_table(&self, wd: &WinnerDetermination) -> Vec<f64> {
        match self.family {
            BoostFamily::Ama => {
                let (class, _) = wd.size_classes();
                class.iter().map(|&c| self.boosts[c]).collect()
            }
            BoostFamily::Vvca => {
                let m = wd.config.items();
                wd.allocations
                    .iter()
                    .map(|a| {
                        a.sizes()
                            .iter()
                            .enumerate()
                            .filter(|(_, &s)| s > 0)
                            .map(|(i, &s)| self.boosts[i * m + s - 1])
                            .sum()
                    })
                    .collect()
            }
        }
    }
}

/// Affine maximizer: maximize `Σ_i w_i v_i(a) + λ_a`, charge each bidder
/// the weighted externality it imposes, scaled back by `1/w_i`.
pub fn ama(values: &[f64], weights: &[f64], boosts: &[f64], wd: &WinnerDetermination) -> DeterministicOutcome {
    let mut table = Vec::new();
    wd.bidder_values(values, &mut table);
    ama_from_table(&table, weights, boosts)
}

fn ama_from_table(table: &[f64], weights: &[f64], boosts: &[f64]) -> DeterministicOutcome {
    let n = weights.len();
    let scores: Vec<f64> = table
        .chunks(n)
        .zip(boosts)
        .map(|(row, l)| row.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() + l)
        .collect();
    let best = argmax(&scores);
    let payments = (0..n)
        .map(|i| {
            let others = |a: usize| scores[a] - weights[i] * table[a * n + i];
            let pivot = (0..scores.len()).map(others).fold(f64::NEG_INFINITY, f64::max);
            (pivot - others(best)) / weights[i]
        })
        .collect();
    DeterministicOutcome {
        allocation: best,
        payments,
    }
}

/// Revenue of one profile from a precomputed bidder-value table.
fn table_revenue(table: &[f64], weights: &[f64], boosts: &[f64]) -> f64 {
    let n = weights.len();
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (a, (row, l)) in table.chunks(n).zip(boosts).enumerate() {
        let s = row.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() + l;
        if s > best_score {
            best_score = s;
            best = a;
        }
    }
    let mut revenue = 0.0;
    for i in 0..n {
        let mut pivot = f64::NEG_INFINITY;
        for (row, l) in table.chunks(n).zip(boosts) {
            let s = row
                .iter()
                .zip(weights)
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, (v, w))| v * w)
                .sum::<f64>()
                + l;
            pivot = pivot.max(s);
        }
        let row = &table[best * n..(best + 1) * n];
        let at_best = row
            .iter()
            .zip(weights)
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, (v, w))| v * w)
            .sum::<f64>()
            + boosts[best];
        revenue += (pivot - at_best) / weights[i];
    }
    revenue
}

/// A classic mechanism usable wherever a learned one is.
#[derive(Clone, Debug)]
pub struct ClassicMechanism {
    name: String,
    wd: WinnerDetermination,
    weights: Vec<f64>,
    boosts: Vec<f64>,
    exact_vcg: bool,
}

impl ClassicMechanism {
    pub fn vcg(config: &AuctionConfig) -> Result<Self> {
        let wd = WinnerDetermination::new(config)?;
        let n = config.bidders();
        let len = wd.len();
        Ok(ClassicMechanism {
            name: "vcg".into(),
            wd,
            weights: vec![1.0; n],
            boosts: vec![0.0; len],
            exact_vcg: true,
        })
    }

    pub fn ama(config: &AuctionConfig, params: &AmaParams) -> Result<Self> {
        let wd = WinnerDetermination::new(config)?;
        params.validate(&wd)?;
        let boosts = params.boost_table(&wd);
        let name = match params.family {
            BoostFamily::Ama => "ama",
            BoostFamily::Vvca => "vvca",
        };
        Ok(ClassicMechanism {
            name: name.into(),
            wd,
            weights: params.weights.clone(),
            boosts,
            exact_vcg: false,
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn winner_determination(&self) -> &WinnerDetermination {
        &self.wd
    }

    pub fn outcome(&self, values: &[f64]) -> DeterministicOutcome {
        if self.exact_vcg {
            vcg(values, &self.wd)
        } else {
            ama(values, &self.weights, &self.boosts, &self.wd)
        }
    }

    /// Mean revenue over a batch, fanned out over worker threads.
    pub fn mean_revenue(&self, profiles: &ValuationProfile) -> f64 {
        let per = self.wd.config.bidders() * self.wd.config.bundles();
        let total: f64 = profiles
            .values()
            .par_chunks(per * 4096)
            .map(|chunk| {
                chunk
                    .chunks(per)
                    .map(|v| self.outcome(v).payments.iter().sum::<f64>())
                    .sum::<f64>()
            })
            .collect::<Vec<_>>()
            .into_iter()
            .sum();
        total / profiles.len().max(1) as f64
    }
}

impl Mechanism for ClassicMechanism {
    fn config(&self) -> &AuctionConfig {
        &self.wd.config
    }

    fn name(&self) -> &str {
        &self.name
    }

    /// Outcomes are piecewise constant in the bids, so they enter the graph
    /// as constants.
    fn forward(&self, g: &mut Graph, _params: &[Var], bids: Var) -> Result<Outcome> {
        let batch = check_bids(g, bids, &self.wd.config)?;
        let (n, k) = (self.wd.config.bidders(), self.wd.config.bundles());
        let mut z = vec![0.0; batch * n * k];
        let mut p = vec![0.0; batch * n];
        for (b, values) in g.value(bids).data().chunks(n * k).enumerate() {
            let out = self.outcome(values);
            for &(i, s) in &self.wd.assignments[out.allocation] {
                z[(b * n + i) * k + s] = 1.0;
            }
            p[b * n..(b + 1) * n].copy_from_slice(&out.payments);
        }
        let allocation = g.constant(Tensor::new(vec![batch, n, k], z)?);
        let payments = g.constant(Tensor::new(vec![batch, n], p)?);
        Ok(Outcome { allocation, payments })
    }
}

/// Bidder-value tables of a training sample, reused across candidates.
struct Tables {
    data: Vec<Vec<f64>>,
}

impl Tables {
    fn new(wd: &WinnerDetermination, profiles: &ValuationProfile) -> Self {
        let data = (0..profiles.len())
            .map(|p| {
                let mut t = Vec::new();
                wd.bidder_values(profiles.profile(p), &mut t);
                t
            })
            .collect();
        Tables { data }
    }

    fn revenue(&self, weights: &[f64], boosts: &[f64]) -> f64 {
        let total: f64 = self.data.iter().map(|t| table_revenue(t, weights, boosts)).sum();
        total / self.data.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Candidate values of w_i / w_0 for every bidder after the first.
    pub weight_ratios: Vec<f64>,
    /// Candidate values of every boost coordinate.
    pub boost_values: Vec<f64>,
    pub max_points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            weight_ratios: vec![0.5, 0.75, 1.0, 1.25, 1.5],
            boost_values: (0..=20).map(|i| f64::from(i) / 10.0).collect(),
            max_points: 5_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SearchResult {
    pub params: AmaParams,
    pub train_revenue: f64,
    pub points: usize,
}

/// Exhaustive search over the grid; the best training revenue wins, ties go
/// to the earliest grid point.
pub fn grid_search_ama(
    wd: &WinnerDetermination,
    family: BoostFamily,
    grid: &GridSpec,
    train: &ValuationProfile,
) -> Result<SearchResult> {
    let n = wd.config.bidders();
    let dims = family.dimensions(wd);
    let weight_dims = n - 1;
    if grid.weight_ratios.is_empty() || grid.boost_values.is_empty() {
        return Err(Error::config("grid axes must be non-empty"));
    }
    if let Some(r) = grid.weight_ratios.iter().find(|r| !(**r > 0.0)) {
        return Err(Error::config(format!("weight ratios must be positive, got {r}")));
    }
    let points =
        (grid.weight_ratios.len() as f64).powi(weight_dims as i32) * (grid.boost_values.len() as f64).powi(dims as i32);
    if points > grid.max_points as f64 {
        return Err(Error::Guard(format!(
            "grid has {points:.0} points, limit is {}",
            grid.max_points
        )));
    }
    let points = points as usize;
    let tables = Tables::new(wd, train);
    let (class, _) = wd.size_classes();
    let decode = |mut idx: usize| -> AmaParams {
        let mut weights = vec![1.0; n];
        for w in weights.iter_mut().skip(1) {
            *w = grid.weight_ratios[idx % grid.weight_ratios.len()];
            idx /= grid.weight_ratios.len();
        }
        let mut boosts = vec![0.0; dims];
        for b in boosts.iter_mut() {
            *b = grid.boost_values[idx % grid.boost_values.len()];
            idx /= grid.boost_values.len();
        }
        AmaParams {
            family,
            weights,
            boosts,
        }
    };
    let evaluate = |idx: usize| -> f64 {
        let p = decode(idx);
        let table = match family {
            BoostFamily::Ama => class.iter().map(|&c| p.boosts[c]).collect(),
            BoostFamily::Vvca => p.boost_table(wd),
        };
        tables.revenue(&p.weights, &table)
    };
    let (best_rev, best_idx) = (0..points).into_par_iter().map(|idx| (evaluate(idx), idx)).reduce(
        || (f64::NEG_INFINITY, usize::MAX),
        |a, b| if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a },
    );
    Ok(SearchResult {
        params: decode(best_idx),
        train_revenue: best_rev,
        points,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalSearchConfig {
    pub restarts: usize,
    /// Step sizes tried in turn, as fractions of the typical grand-bundle
    /// value for boosts and as absolute changes for weights.
    pub steps: Vec<f64>,
    pub max_rounds: usize,
}

impl Default for LocalSearchConfig {
    fn default() -> Self {
        LocalSearchConfig {
            restarts: 10,
            steps: vec![0.5, 0.2, 0.1, 0.05, 0.02],
            max_rounds: 200,
        }
    }
}

/// Coordinate hill climbing from several starts. The first start is the
/// VCG point; the others are random. Returns every restart's optimum in
/// order, each with its training revenue.
pub fn local_search_ama(
    wd: &WinnerDetermination,
    family: BoostFamily,
    cfg: &LocalSearchConfig,
    train: &ValuationProfile,
    rng: &mut impl Rng,
) -> Result<Vec<SearchResult>> {
    if train.is_empty() {
        return Err(Error::config("local search needs training profiles"));
    }
    let n = wd.config.bidders();
    let dims = family.dimensions(wd);
    let tables = Tables::new(wd, train);
    let grand = wd.config.bundles() - 1;
    let scale = (0..train.len())
        .map(|p| (0..n).map(|i| train.bidder(p, i)[grand]).fold(0.0, f64::max))
        .sum::<f64>()
        / train.len() as f64;
    let score = |p: &AmaParams| tables.revenue(&p.weights, &p.boost_table(wd));

    let mut results = Vec::with_capacity(cfg.restarts);
    for r in 0..cfg.restarts {
        let mut current = AmaParams::unit(family, wd);
        if r > 0 {
            for w in current.weights.iter_mut().skip(1) {
                *w = rng.gen_range(0.5..1.5);
            }
            for b in current.boosts.iter_mut() {
                *b = rng.gen_range(0.0..0.5) * scale;
            }
        }
        let mut best = score(&current);
        let mut evaluations = 1;
        for &step in &cfg.steps {
            for _ in 0..cfg.max_rounds {
                let mut improved = false;
                for coord in 1..n + dims {
                    for dir in [1.0, -1.0] {
                        let mut cand = current.clone();
                        if coord < n {
                            cand.weights[coord] = (cand.weights[coord] + dir * step).max(0.05);
                        } else {
                            cand.boosts[coord - n] += dir * step * scale;
                        }
                        let s = score(&cand);
                        evaluations += 1;
                        if s > best + 1e-12 {
                            best = s;
                            current = cand;
                            improved = true;
                        }
                    }
                }
                if !improved {
                    break;
                }
            }
        }
        results.push(SearchResult {
            params: current,
            train_revenue: best,
            points: evaluations,
        });
    }
    Ok(results)
}
