use std::fs;
use std::path::Path;

use caforge_core::auction::{AuctionConfig, ComplementarityScope, Distribution, Setting};
use clap::{Args, ValueEnum};
use serde::Serialize;

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismKind {
    Canet,
    Caformer,
    Vcg,
    Ama,
    Vvca,
    #[value(name = "local_ama")]
    LocalAma,
}

impl MechanismKind {
    pub fn name(self) -> &'static str {
        match self {
            MechanismKind::Canet => "canet",
            MechanismKind::Caformer => "caformer",
            MechanismKind::Vcg => "vcg",
            MechanismKind::Ama => "ama",
            MechanismKind::Vvca => "vvca",
            MechanismKind::LocalAma => "local_ama",
        }
    }
}

/// The auction being studied: value distribution and scale.
#[derive(Clone, Debug, Args, Serialize)]
pub struct AuctionArgs {
    /// Value distribution: A (additive), B or C (complementarities).
    #[arg(long, env = "CAFORGE_SETTING")]
    pub setting: Setting,
    /// Number of bidders.
    #[arg(long, env = "CAFORGE_N")]
    pub n: usize,
    /// Number of items.
    #[arg(long, env = "CAFORGE_M")]
    pub m: usize,
    /// Bundles receiving the complementarity term in settings B/C.
    #[arg(long, env = "CAFORGE_SCOPE", default_value = "multi-item")]
    pub scope: ComplementarityScope,
    /// Master seed for every random stream (default 0).
    #[arg(long, env = "CAFORGE_SEED")]
    pub seed: Option<u64>,
}

impl AuctionArgs {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Validates the combination before any compute.
    pub fn resolve(&self) -> CliResult<(AuctionConfig, Distribution)> {
        let config = AuctionConfig::new(self.n, self.m)?;
        let distribution = Distribution::new(self.setting).with_scope(self.scope);
        distribution.validate(&config)?;
        Ok((config, distribution))
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}
