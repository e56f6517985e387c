use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use caforge_core::auction::AuctionConfig;
use caforge_core::classic::{
    grid_search_ama, local_search_ama, AmaParams, BoostFamily, ClassicMechanism, GridSpec, LocalSearchConfig,
    WinnerDetermination,
};
use caforge_core::mechanism::Mechanism;
use caforge_core::neural::NeuralMechanism;
use caforge_core::report::{append_results, ResultRow};
use caforge_core::rng::{SeedStreams, DATASET, MISREPORTS, TEST};
use caforge_core::train::eval::{evaluate, EvalMetrics, EvalOptions};
use caforge_core::train::misreport::{MisreportConfig, MisreportDomain};
use caforge_core::Error as CoreError;
use clap::Args;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::experiment::{write_json, AuctionArgs, MechanismKind};

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub auction: AuctionArgs,
    #[arg(long, env = "CAFORGE_MECH")]
    pub mech: MechanismKind,
    /// Checkpoint manifest (`.json`) for canet/caformer.
    #[arg(long, env = "CAFORGE_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    /// Test profiles, sampled from the seed's test stream.
    #[arg(long, env = "CAFORGE_SAMPLES", default_value_t = 10_000)]
    pub samples: usize,
    /// Misreport optimization steps per profile.
    #[arg(long, env = "CAFORGE_INNER_STEPS", default_value_t = 1000)]
    pub inner_steps: usize,
    #[arg(long, env = "CAFORGE_MISREPORT_LR", default_value_t = 0.1)]
    pub misreport_lr: f64,
    #[arg(long, env = "CAFORGE_MISREPORT_DOMAIN", default_value = "support")]
    pub misreport_domain: MisreportDomain,
    /// Profiles per misreport batch.
    #[arg(long, env = "CAFORGE_CHUNK", default_value_t = 250)]
    pub chunk: usize,
    /// Profiles used to fit ama/vvca/local_ama parameters.
    #[arg(long, env = "CAFORGE_SEARCH_SAMPLES", default_value_t = 1000)]
    pub search_samples: usize,
    /// Fixed ama/vvca parameters (JSON); skips the search.
    #[arg(long, env = "CAFORGE_AMA_PARAMS")]
    pub ama_params: Option<PathBuf>,
    /// Random restarts for local_ama.
    #[arg(long, env = "CAFORGE_RESTARTS", default_value_t = 10)]
    pub restarts: usize,
    /// Results CSV to append a row to.
    #[arg(long, env = "CAFORGE_RESULTS")]
    pub results: Option<PathBuf>,
    /// Where to write the metrics JSON (also printed to stdout).
    #[arg(long, env = "CAFORGE_METRICS_OUT")]
    pub metrics_out: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    mechanism: &'static str,
    auction: &'a AuctionArgs,
    checkpoint: Option<String>,
    ama_params: Option<AmaParams>,
    search_revenue: Option<f64>,
    metrics: &'a EvalMetrics,
}

fn fit_affine(args: &EvalArgs, config: &AuctionConfig, streams: &SeedStreams) -> CliResult<(AmaParams, Option<f64>)> {
    let wd = WinnerDetermination::new(config)?;
    if let Some(path) = &args.ama_params {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let params: AmaParams = serde_json::from_str(&text)?;
        params.validate(&wd)?;
        return Ok((params, None));
    }
    let (_, distribution) = args.auction.resolve()?;
    let train = distribution.sample(config, args.search_samples.max(1), &mut streams.stream(DATASET))?;
    let local = |family| -> CliResult<(AmaParams, Option<f64>)> {
        let cfg = LocalSearchConfig {
            restarts: args.restarts.max(1),
            ..LocalSearchConfig::default()
        };
        let results = local_search_ama(&wd, family, &cfg, &train, &mut streams.stream("search"))?;
        let best = results
            .into_iter()
            .reduce(|a, b| if b.train_revenue > a.train_revenue { b } else { a })
            .expect("at least one restart");
        Ok((best.params, Some(best.train_revenue)))
    };
    match args.mech {
        MechanismKind::LocalAma => local(BoostFamily::Ama),
        MechanismKind::Ama | MechanismKind::Vvca => {
            let family = if args.mech == MechanismKind::Ama {
                BoostFamily::Ama
            } else {
                BoostFamily::Vvca
            };
            match grid_search_ama(&wd, family, &GridSpec::default(), &train) {
                Ok(r) => Ok((r.params, Some(r.train_revenue))),
                Err(CoreError::Guard(msg)) => {
                    log::warn!("{msg}; falling back to local search");
                    local(family)
                }
                Err(e) => Err(e.into()),
            }
        }
        _ => unreachable!("not an affine maximizer"),
    }
}

pub fn run(args: &EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let (config, distribution) = args.auction.resolve()?;
    if args.samples == 0 {
        return Err(CliError::Config("samples must be at least 1".into()));
    }
    let streams = SeedStreams::new(args.auction.seed());

    let mut ama_params = None;
    let mut search_revenue = None;
    let mech: Box<dyn Mechanism> = match args.mech {
        MechanismKind::Canet | MechanismKind::Caformer => {
            let path = args
                .checkpoint
                .as_ref()
                .ok_or_else(|| CliError::Config(format!("--checkpoint is required for {}", args.mech.name())))?;
            if !path.exists() {
                return Err(CliError::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
            }
            let (net, _) = NeuralMechanism::load(path)?;
            if net.name() != args.mech.name() {
                return Err(CliError::Config(format!(
                    "checkpoint holds a {} network, not {}",
                    net.name(),
                    args.mech.name()
                )));
            }
            if net.config() != &config {
                return Err(CliError::Config(format!(
                    "checkpoint is {} but the evaluation asks for {config}",
                    net.config()
                )));
            }
            Box::new(net)
        }
        MechanismKind::Vcg => Box::new(ClassicMechanism::vcg(&config)?),
        MechanismKind::Ama | MechanismKind::Vvca | MechanismKind::LocalAma => {
            let (params, rev) = fit_affine(args, &config, &streams)?;
            let mech = ClassicMechanism::ama(&config, &params)?.with_name(args.mech.name());
            ama_params = Some(params);
            search_revenue = rev;
            Box::new(mech)
        }
    };

    let profiles = distribution.sample(&config, args.samples, &mut streams.stream(TEST))?;
    let misreport = MisreportConfig {
        steps: args.inner_steps,
        lr: args.misreport_lr,
        domain: args.misreport_domain,
        ..MisreportConfig::default()
    };
    let bounds = misreport.bounds(&distribution, &config)?;
    let opts = EvalOptions {
        misreport,
        chunk: args.chunk,
        parallel: true,
    };
    log::info!(
        "evaluating {} on {} profiles of setting {} {config} with {} misreport steps",
        args.mech.name(),
        args.samples,
        distribution.setting,
        args.inner_steps
    );
    let metrics = evaluate(
        mech.as_ref(),
        &profiles,
        &bounds,
        &opts,
        &mut streams.stream(MISREPORTS),
    )?;

    let output = EvalOutput {
        mechanism: args.mech.name(),
        auction: &args.auction,
        checkpoint: args.checkpoint.as_ref().map(|p| p.display().to_string()),
        ama_params,
        search_revenue,
        metrics: &metrics,
    };
    if let Some(path) = &args.metrics_out {
        write_json(path, &output)?;
    }
    if let Some(path) = &args.results {
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| CliError::io(path, e))?;
        let row = ResultRow {
            mechanism: args.mech.name().into(),
            setting: distribution.setting,
            bidders: config.bidders(),
            items: config.items(),
            revenue: metrics.revenue,
            regret: metrics.regret_mean,
            regret_max: metrics.regret_max,
            ir_violations: metrics.ir_violations,
            feasibility_max_violation: metrics.feasibility_max_violation,
            samples: metrics.samples,
            misreport_steps: metrics.misreport_steps,
            seed: args.auction.seed(),
        };
        append_results(file, &[row], fresh)?;
    }
    writeln!(out, "{}", serde_json::to_string_pretty(&output)?).map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    Ok(())
}
