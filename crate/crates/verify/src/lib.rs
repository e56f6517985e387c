//! Shared helpers for the acceptance suite: a pass/fail ledger printed one
//! line per criterion, finite-difference gradient checks and the tensor
//! permutations used by the equivariance checks.

use std::fmt;
use std::time::{Duration, Instant};

use caforge_core::auction::AuctionConfig;
use caforge_tensor::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
        })
    }
}

/// What one criterion found. `detail` carries the measured numbers.
#[derive(Clone, Debug)]
pub struct Verdict {
    pub status: Status,
    pub detail: String,
}

impl Verdict {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Verdict {
            status: if passed { Status::Pass } else { Status::Fail },
            detail: detail.into(),
        }
    }

    pub fn skip(detail: impl Into<String>) -> Self {
        Verdict {
            status: Status::Skip,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub id: u32,
    pub name: &'static str,
    pub verdict: Verdict,
    pub elapsed: Duration,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} [{:>2}] {}: {} ({:.1}s)",
            self.verdict.status,
            self.id,
            self.name,
            self.verdict.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

/// Runs criteria in order, prints each line as soon as it is known.
#[derive(Debug, Default)]
pub struct Ledger {
    pub outcomes: Vec<Outcome>,
    /// When set, criteria outside the list are skipped.
    pub only: Option<Vec<u32>>,
}

impl Ledger {
    /// Reads a comma-separated id filter such as `1,3,5`.
    pub fn with_filter(filter: Option<&str>) -> Self {
        Ledger {
            outcomes: Vec::new(),
            only: filter.map(|f| f.split(',').filter_map(|id| id.trim().parse().ok()).collect()),
        }
    }

    /// Runs `check`, failing the criterion if it exceeds `budget` or panics.
    pub fn run(&mut self, id: u32, name: &'static str, budget: Option<Duration>, check: impl FnOnce() -> Verdict) {
        let start = Instant::now();
        if self.only.as_ref().is_some_and(|only| !only.contains(&id)) {
            self.push(id, name, Verdict::skip("not selected"), start.elapsed());
            return;
        }
        let verdict = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::new(false, format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let verdict = match budget {
            Some(limit) if verdict.status == Status::Pass && elapsed > limit => Verdict::new(
                false,
                format!("{}; over the {:.0}s budget", verdict.detail, limit.as_secs_f64()),
            ),
            _ => verdict,
        };
        self.push(id, name, verdict, elapsed);
    }

    fn push(&mut self, id: u32, name: &'static str, verdict: Verdict, elapsed: Duration) {
        let outcome = Outcome {
            id,
            name,
            verdict,
            elapsed,
        };
        println!("{outcome}");
        self.outcomes.push(outcome);
    }

    pub fn failures(&self) -> usize {
        self.outcomes
            .iter()
            .filter(|o| o.verdict.status == Status::Fail)
            .count()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches data")
}

/// Relative error with the denominator floored at 1e-5.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Worst central-difference relative error of `d loss / d leaves`. `loss`
/// rebuilds the scalar from the given leaf values; `analytic` holds the
/// reverse-mode gradients in the same layout.
pub fn fd_max_rel_error(leaves: &[Tensor], analytic: &[Tensor], eps: f64, loss: impl Fn(&[Tensor]) -> f64) -> f64 {
    let mut worst = 0.0f64;
    let mut work = leaves.to_vec();
    for (i, leaf) in leaves.iter().enumerate() {
        for e in 0..leaf.numel() {
            let orig = leaf.data()[e];
            work[i].data_mut()[e] = orig + eps;
            let plus = loss(&work);
            work[i].data_mut()[e] = orig - eps;
            let minus = loss(&work);
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[i].data()[e], numeric));
        }
    }
    worst
}

/// Gradient check of `sum(f(inputs) · w)` for fixed random weights `w`, so
/// every output element sees a generic upstream gradient.
pub fn primitive_error<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let build = |g: &mut Graph, inputs: &[Tensor], track: bool| -> Result<(Vec<Var>, Var)> {
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| {
                if track {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        let out = f(g, &vars)?;
        let w = uniform(g.shape(out), -1.0, 1.0, &mut rng(99));
        let w = g.constant(w);
        let prod = g.mul(out, w)?;
        Ok((vars, g.sum(prod)))
    };
    let mut g = Graph::new();
    let (vars, loss) = build(&mut g, inputs, true)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();
    Ok(fd_max_rel_error(inputs, &analytic, eps, |x| {
        let mut g = Graph::new();
        let (_, loss) = build(&mut g, x, false).expect("forward succeeded once");
        g.value(loss).item()
    }))
}

/// Bundle index that bundle `s` maps to when item j is renamed `perm[j]`.
pub fn relabel_bundle(config: &AuctionConfig, perm: &[usize], s: usize) -> usize {
    let mask = config.bundle_mask(s);
    let mut out = 0u32;
    for (j, &to) in perm.iter().enumerate() {
        if mask >> j & 1 == 1 {
            out |= 1 << to;
        }
    }
    config.bundle_index(out)
}

/// Applies an item relabeling to the last (bundle) axis of `[.., k]`.
pub fn relabel_bundles(t: &Tensor, config: &AuctionConfig, perm: &[usize]) -> Tensor {
    let k = config.bundles();
    let mut out = t.clone();
    for (row_in, row_out) in t.data().chunks(k).zip(out.data_mut().chunks_mut(k)) {
        for s in 0..k {
            row_out[relabel_bundle(config, perm, s)] = row_in[s];
        }
    }
    out
}

/// Moves index `i` of axis 1 to `perm[i]`, for `[batch, n]` or `[batch, n, ..]`.
pub fn permute_axis1(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let n = shape[1];
    let inner: usize = shape[2..].iter().product();
    let mut out = t.clone();
    for b in 0..shape[0] {
        for (i, &to) in perm.iter().enumerate() {
            let src = (b * n + i) * inner;
            let dst = (b * n + to) * inner;
            out.data_mut()[dst..dst + inner].copy_from_slice(&t.data()[src..src + inner]);
        }
    }
    out
}

/// A uniformly random permutation of `0..n`.
pub fn random_permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}
