//! Differentiable map from raw logits to a combinatorially feasible
//! allocation.
//!
//! Three score matrices come in: an agent head `A` and a bundle head `A'`
//! (both n×k) and an item head `B` (m×k). Per item, `B` becomes a
//! distribution over the bundles containing that item; each bundle's
//! availability is the smallest such share over its items. Separately, `A`
//! is normalized across agents and `A'` across bundles, and their elementwise
//! minimum is scaled by bundle availability:
//!
//! `Z[i][S] = min_{j∈S} B_adj[j][S] · min(softmax_agents(A), softmax_bundles(A'))[i][S]`
//!
//! Every item's total mass is then at most the sum of its bundle shares,
//! which is one, and each agent row and bundle column sums to at most one.

use caforge_tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::auction::AuctionConfig;
use crate::error::{Error, Result};

pub const DEFAULT_SENTINEL: f64 = 1e9;
/// Logit given to bundles that do not contain an item; its softmax weight
/// underflows to exactly zero.
const EXCLUDED_LOGIT: f64 = -1e30;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Each item's softmax runs over the bundles containing it.
    #[default]
    Masked,
    /// Each item's softmax runs over all bundles.
    Unmasked,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked" => Ok(MaskMode::Masked),
            "unmasked" => Ok(MaskMode::Unmasked),
            other => Err(Error::config(format!("unknown mask mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FeasibleLayer {
    config: AuctionConfig,
    theta: f64,
    mode: MaskMode,
    sentinel: f64,
    /// m×k, 1 where the item is not in the bundle.
    excluded: Tensor,
}

/// Graph nodes of one pass through the layer; leading batch axes are kept.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub z: Var,
    pub b_adjusted: Var,
    pub b_masked: Var,
    /// `[.., 1, k]`, ready to broadcast over agents.
    pub b_bundle: Var,
    pub agent_bundle: Var,
}

impl FeasibleLayer {
    pub fn new(config: &AuctionConfig, theta: f64, mode: MaskMode) -> Result<Self> {
        if !(theta > 0.0) || !theta.is_finite() {
            return Err(Error::config(format!("temperature must be positive, got {theta}")));
        }
        let excluded = config.incidence().to_tensor().map(|x| 1.0 - x);
        Ok(FeasibleLayer {
            config: *config,
            theta,
            mode,
            sentinel: DEFAULT_SENTINEL,
            excluded,
        })
    }

    pub fn with_sentinel(mut self, sentinel: f64) -> Self {
        self.sentinel = sentinel;
        self
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    fn check(&self, g: &Graph, x: Var, rows: usize, what: &str) -> Result<usize> {
        let shape = g.shape(x);
        let rank = shape.len();
        if rank < 2 || shape[rank - 2] != rows || shape[rank - 1] != self.config.bundles() {
            return Err(Error::config(format!(
                "{what} logits must end in [{rows}, {}], got {shape:?}",
                self.config.bundles()
            )));
        }
        Ok(rank)
    }

    /// Per-item distribution over bundles, `[.., m, k]`.
    pub fn item_bundle_scores(&self, g: &mut Graph, item_logits: Var) -> Result<Var> {
        let rank = self.check(g, item_logits, self.config.items(), "item")?;
        let logits = match self.mode {
            MaskMode::Masked => g.masked_fill(item_logits, &self.excluded, EXCLUDED_LOGIT)?,
            MaskMode::Unmasked => item_logits,
        };
        Ok(g.softmax(logits, rank - 1, self.theta)?)
    }

    /// Returns the sentinel-masked matrix and the per-bundle minimum over
    /// its items, `[.., 1, k]`.
    pub fn bundle_availability(&self, g: &mut Graph, b_adjusted: Var) -> Result<(Var, Var)> {
        let rank = self.check(g, b_adjusted, self.config.items(), "item")?;
        let masked = g.masked_fill(b_adjusted, &self.excluded, self.sentinel)?;
        let bundle = g.min_axis(masked, rank - 2, true)?;
        Ok((masked, bundle))
    }

    pub fn agent_bundle_scores(&self, g: &mut Graph, agent: Var, bundle: Var) -> Result<Var> {
        self.check(g, agent, self.config.bidders(), "agent")?;
        self.check(g, bundle, self.config.bidders(), "bundle")?;
        agent_bundle_scores(g, agent, bundle, self.theta)
    }

    pub fn compose(&self, g: &mut Graph, b_bundle: Var, agent_bundle: Var) -> Result<Var> {
        Ok(g.mul(b_bundle, agent_bundle)?)
    }

    pub fn forward(&self, g: &mut Graph, agent: Var, bundle: Var, item: Var) -> Result<LayerVars> {
        let b_adjusted = self.item_bundle_scores(g, item)?;
        let (b_masked, b_bundle) = self.bundle_availability(g, b_adjusted)?;
        let agent_bundle = self.agent_bundle_scores(g, agent, bundle)?;
        let z = self.compose(g, b_bundle, agent_bundle)?;
        Ok(LayerVars {
            z,
            b_adjusted,
            b_masked,
            b_bundle,
            agent_bundle,
        })
    }
}

/// Elementwise minimum of the agent head normalized over agents (axis -2)
/// and the bundle head normalized over bundles (axis -1).
pub fn agent_bundle_scores(g: &mut Graph, agent: Var, bundle: Var, theta: f64) -> Result<Var> {
    let rank = g.shape(agent).len();
    if rank < 2 || g.shape(agent) != g.shape(bundle) {
        return Err(Error::config(format!(
            "agent and bundle logits must share a shape of rank ≥ 2, got {:?} and {:?}",
            g.shape(agent),
            g.shape(bundle)
        )));
    }
    let over_agents = g.softmax(agent, rank - 2, theta)?;
    let over_bundles = g.softmax(bundle, rank - 1, theta)?;
    Ok(g.minimum(over_agents, over_bundles)?)
}

/// Raw network outputs for one profile or a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AllocationLogits {
    pub agent: Tensor,
    pub bundle: Tensor,
    pub item: Tensor,
    pub theta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorDump {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&Tensor> for TensorDump {
    fn from(t: &Tensor) -> Self {
        TensorDump {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

/// The allocation with every intermediate, for diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibleAllocation {
    pub z: TensorDump,
    pub b_adjusted: TensorDump,
    pub b_masked: TensorDump,
    pub b_bundle: TensorDump,
    pub agent_bundle: TensorDump,
}

impl FeasibleAllocation {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Runs the layer outside of any training graph.
pub fn allocate(config: &AuctionConfig, logits: &AllocationLogits, mode: MaskMode) -> Result<FeasibleAllocation> {
    let layer = FeasibleLayer::new(config, logits.theta, mode)?;
    let mut g = Graph::new();
    let a = g.constant(logits.agent.clone());
    let a2 = g.constant(logits.bundle.clone());
    let b = g.constant(logits.item.clone());
    let vars = layer.forward(&mut g, a, a2, b)?;
    let dump = |v: Var| TensorDump::from(g.value(v));
    Ok(FeasibleAllocation {
        z: dump(vars.z),
        b_adjusted: dump(vars.b_adjusted),
        b_masked: dump(vars.b_masked),
        b_bundle: dump(vars.b_bundle),
        agent_bundle: dump(vars.agent_bundle),
    })
}
