//! Learned mechanisms: a network emits allocation logits and pricing
//! fractions, the feasibility layer turns the logits into an allocation.

pub mod caformer;
mod canet;

use std::path::{Path, PathBuf};

use caforge_tensor::{Graph, Manifest, ParamStore, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::auction::AuctionConfig;
use crate::error::{Error, Result};
use crate::feasible::{FeasibleLayer, LayerVars, MaskMode};
use crate::mechanism::{check_bids, price, Mechanism, Outcome};

pub use caformer::PositionalMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Architecture {
    Canet {
        hidden: Vec<usize>,
    },
    Caformer {
        d_model: usize,
        heads: usize,
        #[serde(default)]
        positional: PositionalMode,
        #[serde(default)]
        normalize_item_projection: bool,
    },
}

impl Architecture {
    pub fn canet_default() -> Self {
        Architecture::Canet { hidden: vec![100; 3] }
    }

    pub fn caformer_default(positional: PositionalMode) -> Self {
        Architecture::Caformer {
            d_model: 64,
            heads: 2,
            positional,
            normalize_item_projection: false,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Architecture::Canet { .. } => "canet",
            Architecture::Caformer { .. } => "caformer",
        }
    }
}

/// Everything needed to rebuild a network without its training config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub architecture: Architecture,
    pub bidders: usize,
    pub items: usize,
    pub theta: f64,
    #[serde(default)]
    pub mask_mode: MaskMode,
}

impl NetworkSpec {
    pub fn new(architecture: Architecture, config: &AuctionConfig, theta: f64) -> Self {
        NetworkSpec {
            architecture,
            bidders: config.bidders(),
            items: config.items(),
            theta,
            mask_mode: MaskMode::default(),
        }
    }

    pub fn config(&self) -> Result<AuctionConfig> {
        AuctionConfig::new(self.bidders, self.items)
    }

    fn validate(&self) -> Result<()> {
        match &self.architecture {
            Architecture::Canet { hidden } if hidden.contains(&0) => {
                Err(Error::config("hidden layer widths must be positive"))
            }
            Architecture::Caformer { d_model, heads, .. } if *heads == 0 || d_model % heads != 0 => Err(Error::config(
                format!("d_model {d_model} is not divisible into {heads} heads"),
            )),
            _ => Ok(()),
        }
    }
}

/// Parameters bound on a graph, looked up by name.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: &'a [Var],
}

impl<'a> Bound<'a> {
    pub fn new(store: &'a ParamStore, vars: &'a [Var]) -> Self {
        assert_eq!(store.len(), vars.len());
        Bound { store, vars }
    }

    pub fn get(&self, name: &str) -> Var {
        let idx = self
            .store
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        self.vars[idx]
    }
}

/// Raw network outputs before the feasibility layer.
#[derive(Clone, Copy, Debug)]
pub struct Heads {
    pub agent: Var,
    pub bundle: Var,
    pub item: Var,
    pub fractions: Var,
}

/// All nodes of one forward pass, for diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct Detailed {
    pub heads: Heads,
    pub layer: LayerVars,
    pub payments: Var,
}

#[derive(Clone, Debug)]
pub struct NeuralMechanism {
    spec: NetworkSpec,
    config: AuctionConfig,
    layer: FeasibleLayer,
    params: ParamStore,
}

impl NeuralMechanism {
    /// Glorot-initialized weights, zero biases.
    pub fn new(spec: NetworkSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let config = spec.config()?;
        let params = match &spec.architecture {
            Architecture::Canet { hidden } => canet::init(&config, hidden, rng)?,
            Architecture::Caformer { d_model, .. } => caformer::init(*d_model, rng)?,
        };
        let layer = FeasibleLayer::new(&config, spec.theta, spec.mask_mode)?;
        Ok(NeuralMechanism {
            spec,
            config,
            layer,
            params,
        })
    }

    /// Rebuilds a mechanism from stored weights; names and shapes must match
    /// what the spec prescribes.
    pub fn from_params(spec: NetworkSpec, params: ParamStore) -> Result<Self> {
        let template = Self::new(spec, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        let expected: Vec<_> = template.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let found: Vec<_> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        if expected != found {
            return Err(Error::config(format!(
                "checkpoint parameters do not match the {} architecture",
                template.spec.architecture.kind()
            )));
        }
        Ok(NeuralMechanism { params, ..template })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn param_store(&self) -> &ParamStore {
        &self.params
    }

    pub fn param_store_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn heads(&self, g: &mut Graph, params: &[Var], bids: Var) -> Result<Heads> {
        let batch = check_bids(g, bids, &self.config)?;
        let p = Bound::new(&self.params, params);
        match &self.spec.architecture {
            Architecture::Canet { hidden } => canet::forward(g, &p, &self.config, hidden.len(), bids, batch),
            Architecture::Caformer {
                d_model,
                heads,
                positional,
                normalize_item_projection,
            } => {
                let opts = caformer::Options {
                    d: *d_model,
                    heads: *heads,
                    positional: *positional,
                    normalize_items: *normalize_item_projection,
                };
                caformer::forward(g, &p, &self.config, &opts, bids)
            }
        }
    }

    pub fn forward_detailed(&self, g: &mut Graph, params: &[Var], bids: Var) -> Result<Detailed> {
        let heads = self.heads(g, params, bids)?;
        let layer = self.layer.forward(g, heads.agent, heads.bundle, heads.item)?;
        let payments = price(g, heads.fractions, layer.z, bids)?;
        Ok(Detailed { heads, layer, payments })
    }

    /// Writes `<stem>.bin` and `<stem>.json`; the manifest carries the
    /// network spec plus any extra metadata.
    pub fn save(&self, dir: &Path, stem: &str, extra: serde_json::Value) -> Result<PathBuf> {
        let meta = serde_json::json!({ "network": self.spec, "extra": extra });
        Ok(self.params.save(dir, stem, meta)?)
    }

    pub fn load(manifest: &Path) -> Result<(Self, Manifest)> {
        let (params, manifest) = ParamStore::load(manifest)?;
        let spec: NetworkSpec = serde_json::from_value(
            manifest
                .meta
                .get("network")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint manifest lacks a network spec".into()))?,
        )?;
        Ok((Self::from_params(spec, params)?, manifest))
    }
}

impl Mechanism for NeuralMechanism {
    fn config(&self) -> &AuctionConfig {
        &self.config
    }

    fn name(&self) -> &str {
        self.spec.architecture.kind()
    }

    fn params(&self) -> Option<&ParamStore> {
        Some(&self.params)
    }

    fn forward(&self, g: &mut Graph, params: &[Var], bids: Var) -> Result<Outcome> {
        let d = self.forward_detailed(g, params, bids)?;
        Ok(Outcome {
            allocation: d.layer.z,
            payments: d.payments,
        })
    }
}
