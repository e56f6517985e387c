use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use caforge_core::feasible::MaskMode;
use caforge_core::neural::{Architecture, NetworkSpec, NeuralMechanism, PositionalMode};
use caforge_core::rng::{SeedStreams, INIT};
use caforge_core::train::misreport::MisreportDomain;
use caforge_core::train::{train, RegretAggregate, RunOutput, TrainConfig};
use clap::Args;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::experiment::{create_dir, write_json, AuctionArgs, MechanismKind};
use crate::gen::{load_dataset, DatasetManifest};

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub auction: AuctionArgs,
    /// canet or caformer.
    #[arg(long, env = "CAFORGE_MECH")]
    pub mech: MechanismKind,
    #[arg(long, env = "CAFORGE_OUT_DIR")]
    pub out_dir: PathBuf,
    /// TOML or JSON file with training settings; flags override it.
    #[arg(long, env = "CAFORGE_CONFIG")]
    pub config: Option<PathBuf>,
    /// Dataset manifest written by `gen`; otherwise a pool is sampled.
    #[arg(long, env = "CAFORGE_DATASET")]
    pub dataset: Option<PathBuf>,

    #[arg(long, env = "CAFORGE_ITERS")]
    pub iters: Option<usize>,
    #[arg(long, env = "CAFORGE_BATCH_SIZE")]
    pub batch_size: Option<usize>,
    #[arg(long, env = "CAFORGE_INNER_STEPS")]
    pub inner_steps: Option<usize>,
    #[arg(long, env = "CAFORGE_EVAL_INNER_STEPS")]
    pub eval_inner_steps: Option<usize>,
    #[arg(long, env = "CAFORGE_LR")]
    pub lr: Option<f64>,
    #[arg(long, env = "CAFORGE_MISREPORT_LR")]
    pub misreport_lr: Option<f64>,
    #[arg(long, env = "CAFORGE_MISREPORT_DOMAIN")]
    pub misreport_domain: Option<MisreportDomain>,
    #[arg(long, env = "CAFORGE_WEIGHT_LR")]
    pub weight_lr: Option<f64>,
    #[arg(long, env = "CAFORGE_RHO")]
    pub rho: Option<f64>,
    #[arg(long, env = "CAFORGE_THETA")]
    pub theta: Option<f64>,
    #[arg(long, env = "CAFORGE_ALPHA")]
    pub alpha: Option<f64>,
    #[arg(long, env = "CAFORGE_RGT_START")]
    pub rgt_start: Option<f64>,
    #[arg(long, env = "CAFORGE_RGT_END")]
    pub rgt_end: Option<f64>,
    #[arg(long, env = "CAFORGE_W_RGT_INIT")]
    pub w_rgt_init: Option<f64>,
    /// mean or max over bidders.
    #[arg(long, env = "CAFORGE_REGRET_AGGREGATE")]
    pub regret_aggregate: Option<RegretAggregate>,
    /// Offline pool size when no dataset is given; 0 samples on the fly.
    #[arg(long, env = "CAFORGE_TRAIN_POOL")]
    pub train_pool: Option<usize>,
    #[arg(long, env = "CAFORGE_VALIDATE_EVERY")]
    pub validate_every: Option<usize>,
    #[arg(long, env = "CAFORGE_VALIDATION_SAMPLES")]
    pub validation_samples: Option<usize>,
    #[arg(long, env = "CAFORGE_CHECKPOINT_EVERY")]
    pub checkpoint_every: Option<usize>,

    /// CANet hidden widths, comma separated.
    #[arg(long, env = "CAFORGE_HIDDEN", value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long, env = "CAFORGE_D_MODEL")]
    pub d_model: Option<usize>,
    #[arg(long, env = "CAFORGE_HEADS")]
    pub heads: Option<usize>,
    /// none or agent-bundle; defaults to agent-bundle in setting C.
    #[arg(long, env = "CAFORGE_POSITIONAL")]
    pub positional: Option<PositionalMode>,
    #[arg(long, env = "CAFORGE_NORMALIZE_ITEM_PROJECTION")]
    pub normalize_item_projection: bool,
    #[arg(long, env = "CAFORGE_MASK_MODE", default_value = "masked")]
    pub mask_mode: MaskMode,

    /// Run validation chunks on all cores.
    #[arg(long, env = "CAFORGE_PARALLEL_VALIDATION")]
    pub parallel_validation: bool,
    #[arg(long, env = "CAFORGE_LOG_EVERY", default_value_t = 100)]
    pub log_every: usize,
}

fn load_config(path: &Path) -> CliResult<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
    };
    Ok(parsed)
}

impl TrainArgs {
    pub fn resolve_config(&self) -> CliResult<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => TrainConfig::default(),
        };
        macro_rules! apply {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = self.$flag { cfg.$field = v; })*
            };
        }
        apply!(
            iters => iterations,
            batch_size => batch_size,
            inner_steps => inner_steps,
            eval_inner_steps => eval_inner_steps,
            lr => lr,
            misreport_lr => misreport_lr,
            misreport_domain => misreport_domain,
            weight_lr => weight_lr,
            rho => rho,
            theta => theta,
            alpha => alpha,
            rgt_start => rgt_start,
            rgt_end => rgt_end,
            w_rgt_init => w_rgt_init,
            regret_aggregate => regret_aggregate,
            train_pool => train_pool,
            validate_every => validate_every,
            validation_samples => validation_samples,
            checkpoint_every => checkpoint_every,
        );
        if let Some(seed) = self.auction.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn architecture(&self) -> CliResult<Architecture> {
        match self.mech {
            MechanismKind::Canet => Ok(Architecture::Canet {
                hidden: self.hidden.clone().unwrap_or_else(|| vec![100; 3]),
            }),
            MechanismKind::Caformer => {
                let positional = self.positional.unwrap_or(match self.auction.setting {
                    caforge_core::auction::Setting::C => PositionalMode::AgentBundle,
                    _ => PositionalMode::None,
                });
                let Architecture::Caformer { d_model, heads, .. } = Architecture::caformer_default(positional) else {
                    unreachable!()
                };
                Ok(Architecture::Caformer {
                    d_model: self.d_model.unwrap_or(d_model),
                    heads: self.heads.unwrap_or(heads),
                    positional,
                    normalize_item_projection: self.normalize_item_projection,
                })
            }
            other => Err(CliError::Config(format!(
                "{} is not trainable; use eval for baselines",
                other.name()
            ))),
        }
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'static str,
    version: &'static str,
    mechanism: &'static str,
    auction: &'a AuctionArgs,
    train: &'a TrainConfig,
    network: &'a NetworkSpec,
    dataset: Option<&'a DatasetManifest>,
    checkpoint: String,
    metrics: &'static str,
}

#[derive(Serialize)]
struct TrainSummary {
    iterations: usize,
    final_revenue: f64,
    final_regret_mean: f64,
    final_w_rgt: f64,
    validation: Option<caforge_core::train::eval::EvalMetrics>,
    checkpoint: String,
}

pub fn run(args: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let (config, distribution) = args.auction.resolve()?;
    let architecture = args.architecture()?;
    let cfg = args.resolve_config()?;
    let mut spec = NetworkSpec::new(architecture, &config, cfg.theta);
    spec.mask_mode = args.mask_mode;

    let dataset = match &args.dataset {
        Some(path) => {
            let (manifest, profiles) = load_dataset(path)?;
            if profiles.config() != &config || profiles.distribution() != &distribution {
                return Err(CliError::Config(format!(
                    "dataset holds setting {} {}, run asks for setting {} {config}",
                    manifest.setting,
                    profiles.config(),
                    distribution.setting
                )));
            }
            Some((manifest, profiles))
        }
        None => None,
    };

    let mut mech = NeuralMechanism::new(spec.clone(), &mut SeedStreams::new(cfg.seed).stream(INIT))?;
    create_dir(&args.out_dir)?;
    let output = RunOutput {
        dir: Some(args.out_dir.clone()),
        log_every: args.log_every,
        parallel_validation: args.parallel_validation,
    };
    let (manifest, pool) = match dataset {
        Some((m, p)) => (Some(m), Some(p)),
        None => (None, None),
    };
    let run_manifest = RunManifest {
        command: "train",
        version: env!("CARGO_PKG_VERSION"),
        mechanism: args.mech.name(),
        auction: &args.auction,
        train: &cfg,
        network: &spec,
        dataset: manifest.as_ref(),
        checkpoint: "final.json".into(),
        metrics: "metrics.csv",
    };
    write_json(&args.out_dir.join("run.json"), &run_manifest)?;

    log::info!(
        "training {} on setting {} {config} for {} iterations",
        args.mech.name(),
        distribution.setting,
        cfg.iterations
    );
    let report = train(&mut mech, &distribution, &cfg, pool, &output)?;
    let last = report.history.last().expect("at least one iteration");
    let summary = TrainSummary {
        iterations: cfg.iterations,
        final_revenue: last.revenue,
        final_regret_mean: last.rgt_mean,
        final_w_rgt: last.w_rgt,
        validation: report.validations.last().map(|v| v.metrics.clone()),
        checkpoint: report
            .checkpoints
            .last()
            .and_then(|p| p.file_name())
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    write_json(&args.out_dir.join("summary.json"), &summary)?;
    writeln!(out, "{}", serde_json::to_string_pretty(&summary)?).map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    Ok(())
}
