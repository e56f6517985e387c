//! Adversarial training: inner misreport ascent, outer revenue/regret
//! descent, adaptive task weights and an annealed regret budget.

pub mod eval;
pub mod misreport;
pub mod scheduler;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use caforge_tensor::{Adam, Graph, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::auction::{Distribution, ValuationProfile};
use crate::error::{Error, Result};
use crate::neural::NeuralMechanism;
use crate::rng::{self, SeedStreams};

use eval::{evaluate, EvalMetrics, EvalOptions};
use misreport::{misreport_optimize, regret_terms, MisreportConfig, MisreportDomain};
use scheduler::{anneal_target, SchedulerParams, WeightScheduler};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegretAggregate {
    #[default]
    Mean,
    Max,
}

impl std::str::FromStr for RegretAggregate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(RegretAggregate::Mean),
            "max" => Ok(RegretAggregate::Max),
            other => Err(Error::config(format!("unknown regret aggregate {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub inner_steps: usize,
    /// Misreport steps used for validation.
    pub eval_inner_steps: usize,
    pub lr: f64,
    pub misreport_lr: f64,
    pub misreport_init_noise: f64,
    pub misreport_domain: MisreportDomain,
    pub weight_lr: f64,
    pub rho: f64,
    /// Softmax temperature of the feasibility layer.
    pub theta: f64,
    pub alpha: f64,
    pub rgt_start: f64,
    pub rgt_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Initial raw value of the regret weight.
    pub w_rgt_init: f64,
    /// How per-bidder regret enters the loss and the scheduler.
    pub regret_aggregate: RegretAggregate,
    /// Size of the offline training pool; 0 samples every batch fresh.
    pub train_pool: usize,
    /// 0 disables periodic validation.
    pub validate_every: usize,
    pub validation_samples: usize,
    /// 0 only writes the final checkpoint.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 50_000,
            batch_size: 128,
            inner_steps: 50,
            eval_inner_steps: 1000,
            lr: 7e-4,
            misreport_lr: 0.1,
            misreport_init_noise: 0.1,
            misreport_domain: MisreportDomain::Support,
            weight_lr: 0.01,
            rho: 2.0,
            theta: 10.0,
            alpha: 0.5,
            rgt_start: 0.05,
            rgt_end: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            w_rgt_init: 1.0,
            regret_aggregate: RegretAggregate::Mean,
            train_pool: 640_000,
            validate_every: 5000,
            validation_samples: 1000,
            checkpoint_every: 10_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("misreport-lr", self.misreport_lr),
            ("weight-lr", self.weight_lr),
            ("rho", self.rho),
            ("theta", self.theta),
            ("rgt-start", self.rgt_start),
            ("rgt-end", self.rgt_end),
            ("eps", self.eps),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {value}")));
            }
        }
        if !(self.alpha >= 0.0) || !(self.misreport_init_noise >= 0.0) {
            return Err(Error::config("alpha and misreport-init-noise must be non-negative"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::config("iterations and batch-size must be at least 1"));
        }
        if self.validate_every > 0 && self.validation_samples == 0 {
            return Err(Error::config("validation needs validation-samples >= 1"));
        }
        if self.train_pool > 0 && self.train_pool < self.batch_size {
            return Err(Error::config("train-pool must hold at least one batch"));
        }
        Ok(())
    }

    pub fn misreport(&self, steps: usize) -> MisreportConfig {
        MisreportConfig {
            steps,
            lr: self.misreport_lr,
            init_noise: self.misreport_init_noise,
            domain: self.misreport_domain,
        }
    }

    pub fn scheduler(&self) -> SchedulerParams {
        SchedulerParams {
            lr: self.weight_lr,
            rho: self.rho,
            alpha: self.alpha,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn target(&self, iteration: usize) -> f64 {
        anneal_target(iteration, self.iterations, self.rgt_start, self.rgt_end)
    }
}

/// `-w_rev·log(1 + rev) + w_rgt·agg(rgt)` with `rev` a scalar and `rgt`
/// per bidder.
pub fn outer_loss(g: &mut Graph, rev: Var, rgt: Var, w_rev: f64, w_rgt: f64, agg: RegretAggregate) -> Result<Var> {
    let log_rev = g.add_scalar(rev, 1.0);
    let log_rev = g.log(log_rev);
    let rev_term = g.scale(log_rev, -w_rev);
    let rgt = match agg {
        RegretAggregate::Mean => g.mean(rgt),
        RegretAggregate::Max => {
            // max as -min(-x)
            let neg = g.neg(rgt);
            let low = g.min_axis(neg, 0, false)?;
            g.neg(low)
        }
    };
    let rgt_term = g.scale(rgt, w_rgt);
    Ok(g.add(rev_term, rgt_term)?)
}

fn aggregate(values: &[f64], agg: RegretAggregate) -> f64 {
    match agg {
        RegretAggregate::Mean => values.iter().sum::<f64>() / values.len() as f64,
        RegretAggregate::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// One row of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub revenue: f64,
    pub regret: Vec<f64>,
    pub rgt_mean: f64,
    pub rgt_max: f64,
    pub w_rgt: f64,
    pub rgt_target: f64,
    pub loss: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationRecord {
    pub iter: usize,
    pub metrics: EvalMetrics,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub history: Vec<IterationRecord>,
    pub validations: Vec<ValidationRecord>,
    pub scheduler: WeightScheduler,
    pub checkpoints: Vec<PathBuf>,
}

/// Where a run writes its artifacts. Without a directory the run keeps
/// everything in memory.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
    /// Log progress every this many iterations (0 = never).
    pub log_every: usize,
    /// Fan validation chunks across threads.
    pub parallel_validation: bool,
}

struct MetricLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricLog {
    fn create(path: PathBuf, bidders: usize) -> Result<Self> {
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut log = MetricLog {
            out: BufWriter::new(file),
            path,
        };
        let mut header = String::from("iter,revenue,rgt_mean,rgt_max,w_rgt,rgt_target,wall_time_s");
        for i in 0..bidders {
            header.push_str(&format!(",rgt_{i}"));
        }
        log.line(&header)?;
        Ok(log)
    }

    fn line(&mut self, text: &str) -> Result<()> {
        writeln!(self.out, "{text}").map_err(|e| Error::io(&self.path, e))
    }

    fn record(&mut self, r: &IterationRecord) -> Result<()> {
        let mut row = format!(
            "{},{},{},{},{},{},{:.3}",
            r.iter, r.revenue, r.rgt_mean, r.rgt_max, r.w_rgt, r.rgt_target, r.wall_time_s
        );
        for x in &r.regret {
            row.push_str(&format!(",{x}"));
        }
        self.line(&row)
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Source of training batches: a shuffled offline pool or fresh samples.
enum Batches {
    Pool {
        pool: ValuationProfile,
        order: Vec<usize>,
        cursor: usize,
        shuffle: rand_chacha::ChaCha8Rng,
    },
    Fresh {
        distribution: Distribution,
        rng: rand_chacha::ChaCha8Rng,
    },
}

impl Batches {
    fn next(&mut self, mech: &NeuralMechanism, size: usize) -> Result<ValuationProfile> {
        match self {
            Batches::Pool {
                pool,
                order,
                cursor,
                shuffle,
            } => {
                if *cursor + size > order.len() {
                    order.shuffle(shuffle);
                    *cursor = 0;
                }
                let batch = pool.gather(&order[*cursor..*cursor + size]);
                *cursor += size;
                Ok(batch)
            }
            Batches::Fresh { distribution, rng } => {
                distribution.sample(crate::mechanism::Mechanism::config(mech), size, rng)
            }
        }
    }
}

/// Trains `mech` in place. `pool` overrides the sampled offline pool (for
/// example a cache written by the dataset generator).
pub fn train(
    mech: &mut NeuralMechanism,
    distribution: &Distribution,
    cfg: &TrainConfig,
    pool: Option<ValuationProfile>,
    output: &RunOutput,
) -> Result<TrainReport> {
    use crate::mechanism::Mechanism;

    cfg.validate()?;
    let config = *mech.config();
    distribution.validate(&config)?;
    let streams = SeedStreams::new(cfg.seed);
    let n = config.bidders();

    let mut batches = match pool {
        Some(p) => {
            if p.config() != &config {
                return Err(Error::config(format!(
                    "training pool is {} but the network is {config}",
                    p.config()
                )));
            }
            if p.len() < cfg.batch_size {
                return Err(Error::config("training pool is smaller than one batch"));
            }
            let mut shuffle = streams.stream(rng::SHUFFLE);
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.shuffle(&mut shuffle);
            Batches::Pool {
                pool: p,
                order,
                cursor: 0,
                shuffle,
            }
        }
        None if cfg.train_pool > 0 => {
            let p = distribution.sample(&config, cfg.train_pool, &mut streams.stream(rng::DATASET))?;
            let mut shuffle = streams.stream(rng::SHUFFLE);
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.shuffle(&mut shuffle);
            Batches::Pool {
                pool: p,
                order,
                cursor: 0,
                shuffle,
            }
        }
        None => Batches::Fresh {
            distribution: *distribution,
            rng: streams.stream(rng::DATASET),
        },
    };

    let bounds = cfg.misreport(0).bounds(distribution, &config)?;
    let inner = cfg.misreport(cfg.inner_steps);
    let mut mis_rng = streams.stream(rng::MISREPORTS);
    let sched_params = cfg.scheduler();
    let mut sched = WeightScheduler::new(cfg.w_rgt_init, &sched_params);
    let mut flat = mech.param_store().flatten();
    let mut adam = Adam::with_betas(flat.len(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);

    let validation = if cfg.validate_every > 0 {
        Some(distribution.sample(&config, cfg.validation_samples, &mut streams.stream(rng::VALIDATION))?)
    } else {
        None
    };
    let eval_opts = EvalOptions {
        misreport: cfg.misreport(cfg.eval_inner_steps),
        parallel: output.parallel_validation,
        ..EvalOptions::default()
    };

    let mut log = match &output.dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(MetricLog::create(dir.join("metrics.csv"), n)?)
        }
        None => None,
    };

    let mut report = TrainReport {
        history: Vec::with_capacity(cfg.iterations),
        validations: Vec::new(),
        scheduler: sched,
        checkpoints: Vec::new(),
    };
    let started = Instant::now();

    for iter in 0..cfg.iterations {
        let batch = batches.next(mech, cfg.batch_size)?;
        let truth = batch.to_tensor();
        let mis = misreport_optimize(mech, &truth, &bounds, &inner, &mut mis_rng)?;

        let mut g = Graph::new();
        let params = mech.param_store().bind(&mut g, true);
        let t = g.constant(truth);
        let m = g.constant(mis);
        let terms = regret_terms(&mut g, mech, &params, t, m)?;
        let loss = outer_loss(
            &mut g,
            terms.revenue,
            terms.regret,
            sched.w_rev,
            sched.w_rgt,
            cfg.regret_aggregate,
        )?;

        let revenue = g.value(terms.revenue).item();
        let regret = g.value(terms.regret).data().to_vec();
        let loss_value = g.value(loss).item();
        let grads = g.backward(loss)?;
        let grad_flat = mech.param_store().flatten_grads(&grads, &params);

        if !loss_value.is_finite() || grad_flat.iter().any(|x| !x.is_finite()) {
            let detail = format!("non-finite loss {loss_value} (revenue {revenue}, regret {regret:?})");
            if let Some(dir) = &output.dir {
                let dump = serde_json::json!({
                    "iteration": iter,
                    "loss": loss_value.to_string(),
                    "revenue": revenue.to_string(),
                    "regret": regret.iter().map(|x| x.to_string()).collect::<Vec<_>>(),
                    "w_rgt": sched.w_rgt,
                    "bids_shape": g.shape(t),
                    "bids": g.value(t).data(),
                    "misreports": g.value(m).data(),
                });
                let path = dir.join(format!("nan_dump_{iter}.json"));
                write_json(&path, &dump)?;
                log::error!(
                    "numerical abort at iteration {iter}, batch dumped to {}",
                    path.display()
                );
            }
            return Err(Error::Numerical {
                iteration: iter,
                detail,
            });
        }

        adam.step(&mut flat, &grad_flat);
        mech.param_store_mut().assign_flat(&flat);

        let target = cfg.target(iter);
        let agg = aggregate(&regret, cfg.regret_aggregate);
        sched.update(agg, revenue, target, &sched_params);

        let record = IterationRecord {
            iter,
            revenue,
            rgt_mean: aggregate(&regret, RegretAggregate::Mean),
            rgt_max: aggregate(&regret, RegretAggregate::Max),
            regret,
            w_rgt: sched.w_rgt,
            rgt_target: target,
            loss: loss_value,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        if let Some(l) = log.as_mut() {
            l.record(&record)?;
        }
        if output.log_every > 0 && (iter + 1) % output.log_every == 0 {
            log::info!(
                "iter {:>6} rev {:.4} rgt {:.5} w_rgt {:.3} target {:.5}",
                iter + 1,
                record.revenue,
                record.rgt_mean,
                record.w_rgt,
                target
            );
        }
        report.history.push(record);

        let done = iter + 1;
        if let Some(val) = &validation {
            if done % cfg.validate_every == 0 || done == cfg.iterations {
                let metrics = evaluate(mech, val, &bounds, &eval_opts, &mut streams.stream(rng::VALIDATION))?;
                log::info!(
                    "validation at {done}: rev {:.4} rgt {:.5}",
                    metrics.revenue,
                    metrics.regret_mean
                );
                report.validations.push(ValidationRecord { iter: done, metrics });
            }
        }
        if let Some(dir) = &output.dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.iterations {
                let meta = serde_json::json!({ "iteration": done, "train": cfg });
                report
                    .checkpoints
                    .push(mech.save(dir, &format!("checkpoint_{done}"), meta)?);
            }
        }
    }

    if let Some(dir) = &output.dir {
        let meta = serde_json::json!({ "iteration": cfg.iterations, "train": cfg });
        report.checkpoints.push(mech.save(dir, "final", meta)?);
        if !report.validations.is_empty() {
            write_json(&dir.join("validation.json"), &report.validations)?;
        }
    }
    if let Some(l) = log.as_mut() {
        l.flush()?;
    }
    report.scheduler = sched;
    Ok(report)
}
