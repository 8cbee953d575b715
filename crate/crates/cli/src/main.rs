//! `panelrl`: data generation, encoder pretraining, training, sweeps, Pareto
//! fronts, exact certification and evaluation.

mod run;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use panelrl::classifier::Classifier;
use panelrl::config::RunConfig;
use panelrl::dataset::to_csv;
use panelrl::encoder::{augmented_samples, imputation_rmse, pretrain, Encoder, TrainingSample};
use panelrl::env::{ShapingParams, StateEmbedder};
use panelrl::ndgrad::{load_checkpoint, save_checkpoint};
use panelrl::oracle::certify;
use panelrl::pareto::{self, sweep_grid, upper_envelope, Metric, SweepGrid, SweepRecipe};
use panelrl::policy::ActorCritic;
use panelrl::trainer::{evaluate, log_to_csv, run_sm_ddpo};

use run::Run;
use settings::{ConfigArgs, UsageError};

const ENCODER_KIND: &str = "encoder";
const AGENT_KIND: &str = "agent";

#[derive(Parser)]
#[command(name = "panelrl", version, about = "Cost-sensitive test ordering and diagnosis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw (or load) records and write the standardized splits.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fit the imputing encoder on the encoder-pretraining split.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one classifier/policy pair for a single (lambda, rho).
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        rho: Option<f64>,
        /// Encoder checkpoint; defaults to the pretrain output.
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Train and score every grid instance, writing front.csv.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Extract the upper envelope from a sweep's front.csv.
    Front {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Defaults to the sweep output.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_parser = parse_metric)]
        metric: Option<Metric>,
    },
    /// Certify reward-shaped solutions against exact enumeration on tiny instances.
    Oracle {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Random instances besides the reference one.
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Score a trained agent on the test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Agent checkpoint; defaults to the train output.
        #[arg(long)]
        agent: Option<PathBuf>,
    },
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    match s {
        "f1" => Ok(Metric::F1),
        "am" => Ok(Metric::Am),
        _ => Err(format!("unknown metric '{s}' (expected f1 or am)")),
    }
}

/// A trained classifier/policy pair.
#[derive(Serialize, Deserialize)]
struct AgentCheckpoint {
    lambda: f64,
    rho: f64,
    classifier_version: u64,
    classifier: Classifier,
    policy: ActorCritic,
}

/// Violations found by `oracle`; mapped to its own exit status.
#[derive(Debug)]
struct Violations(usize);

impl std::fmt::Display for Violations {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} exact-dominance violations", self.0)
    }
}

impl std::error::Error for Violations {}

fn encoder_path(cfg: &RunConfig, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| cfg.output_dir.join("pretrain").join("encoder.json"))
}

fn load_encoder(run: &mut Run, path: &PathBuf) -> anyhow::Result<Arc<Encoder>> {
    if !path.is_file() {
        bail!("encoder checkpoint {} not found; run `panelrl pretrain` first", path.display());
    }
    run.input(path)?;
    Ok(Arc::new(load_checkpoint(path, ENCODER_KIND)?))
}

fn gen_data(cfg: RunConfig) -> anyhow::Result<()> {
    let data = cfg.load_data()?;
    let mut run = Run::start(&cfg, "gen-data")?;
    run.write("scheme.json", data.scheme.to_json()?.as_bytes())?;
    let names = ["encoder_train", "rl_train", "encoder_val", "rl_val", "test"];
    for (name, part) in names.iter().zip(data.splits.parts()) {
        run.write(&format!("{name}.csv"), to_csv(part, &data.scheme)?.as_bytes())?;
    }
    println!("gen-data: split sizes {:?}", data.splits.sizes());
    run.finish(&cfg)
}

#[derive(Serialize)]
struct PretrainSummary {
    train_samples: usize,
    val_samples: usize,
    val_rmse: f64,
    /// Same cells filled with zero, the training mean after standardizing.
    val_rmse_mean_fill: f64,
}

fn mean_fill_rmse(samples: &[TrainingSample]) -> f64 {
    let (mut se, mut n) = (0.0, 0usize);
    for s in samples {
        for i in 0..s.truth.len() {
            if !s.observed[i] && s.truth_known[i] {
                se += s.truth[i] * s.truth[i];
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        (se / n as f64).sqrt()
    }
}

fn cmd_pretrain(cfg: RunConfig) -> anyhow::Result<()> {
    use panelrl::io::derive_seed;
    let data = cfg.load_data()?;
    let seed = cfg.seed;
    let mut enc = Encoder::new(data.scheme.d(), cfg.encoder.clone(), derive_seed(seed, "encoder-init", 0))?;
    let copies = cfg.encoder.masks_per_record;
    let train = augmented_samples(&data.splits.encoder_train, &data.scheme, copies, derive_seed(seed, "augment", 0))?;
    let log = pretrain(&mut enc, &train, derive_seed(seed, "pretrain", 0))?;
    let val = augmented_samples(&data.splits.encoder_val, &data.scheme, copies, derive_seed(seed, "augment", 1))?;
    let summary = PretrainSummary {
        train_samples: train.len(),
        val_samples: val.len(),
        val_rmse: imputation_rmse(&enc, &val)?,
        val_rmse_mean_fill: mean_fill_rmse(&val),
    };
    let mut run = Run::start(&cfg, "pretrain")?;
    let ckpt = run.path("encoder.json");
    save_checkpoint(&ckpt, ENCODER_KIND, &enc)?;
    run.record("encoder.json")?;
    let mut csv = String::from("iteration,l1,l2\n");
    for (i, (a, b)) in log.l1.iter().zip(&log.l2).enumerate() {
        csv.push_str(&format!("{i},{a},{b}\n"));
    }
    run.write("pretrain_log.csv", csv.as_bytes())?;
    run.write("summary.json", serde_json::to_string_pretty(&summary)?.as_bytes())?;
    println!(
        "pretrain: val rmse {:.4} (mean fill {:.4})",
        summary.val_rmse, summary.val_rmse_mean_fill
    );
    run.finish(&cfg)
}

fn cmd_train(mut cfg: RunConfig, lambda: Option<f64>, rho: Option<f64>, encoder: Option<PathBuf>) -> anyhow::Result<()> {
    use panelrl::io::derive_seed;
    if let Some(l) = lambda {
        cfg.env.lambda = l;
    }
    if let Some(r) = rho {
        cfg.env.rho = r;
    }
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    let mut run = Run::start(&cfg, "train")?;
    let enc = load_encoder(&mut run, &encoder_path(&cfg, encoder))?;
    let data = cfg.load_data()?;
    let shaping = cfg.shaping()?;
    let env_cfg = cfg.env_config(data.scheme.clone(), shaping);
    let trainer = cfg.trainer_config();
    let clf = Classifier::new(enc.dim(), trainer.classifier.hidden, derive_seed(cfg.seed, "classifier-init", 0))?;
    let out = run_sm_ddpo(enc, clf, None, data.train(), data.val(), &env_cfg, &trainer, cfg.seed)?;
    let report = evaluate(&out.policy, &out.embedder, data.test(), &env_cfg)?;
    run.write("train_log.csv", log_to_csv(&out.log)?.as_bytes())?;
    run.write("eval.json", serde_json::to_string_pretty(&report)?.as_bytes())?;
    let agent = AgentCheckpoint {
        lambda: shaping.lambda,
        rho: shaping.rho,
        classifier_version: out.embedder.version(),
        classifier: out.classifier,
        policy: out.policy,
    };
    save_checkpoint(&run.path("agent.json"), AGENT_KIND, &agent)?;
    run.record("agent.json")?;
    println!(
        "train: test f1 {:.4} mean cost {:.2} panel rates {:?}",
        report.f1(),
        report.tally.mean_cost,
        report.panel_rates
    );
    run.finish(&cfg)
}

fn cmd_sweep(cfg: RunConfig, encoder: Option<PathBuf>) -> anyhow::Result<()> {
    let mut run = Run::start(&cfg, "sweep")?;
    let enc = load_encoder(&mut run, &encoder_path(&cfg, encoder))?;
    let data = cfg.load_data()?;
    let grid = cfg.sweep.grid(data.class_ratio())?;
    let recipe = SweepRecipe {
        encoder: enc,
        scheme: data.scheme.clone(),
        cost_unit: cfg.env.cost_unit,
        trainer: cfg.trainer_config(),
        train: data.train(),
        val: data.val(),
        test: data.test(),
        checkpoint_dir: Some(run.path("checkpoints")),
    };
    let points = sweep_grid(&grid, cfg.seed, cfg.jobs, |_, params, seed| recipe.run(params, seed))?;
    for p in &points {
        if !p.checkpoint.is_empty() {
            run.record(&format!("checkpoints/{}", p.checkpoint))?;
        }
    }
    run.write("front.csv", pareto::to_csv(&points)?.as_bytes())?;
    let failed = points.iter().filter(|p| p.is_failed()).count();
    println!("sweep: {} instances, {failed} failed", points.len());
    run.finish(&cfg)
}

fn cmd_front(cfg: RunConfig, input: Option<PathBuf>, metric: Option<Metric>) -> anyhow::Result<()> {
    let path = input.unwrap_or_else(|| cfg.output_dir.join("sweep").join("front.csv"));
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}; run `panelrl sweep` first", path.display()))?;
    let points = pareto::from_csv(&text)?;
    let metric = metric.unwrap_or(cfg.sweep.metric);
    let env = upper_envelope(&points, metric);
    let mut run = Run::start(&cfg, "front")?;
    run.input(&path)?;
    run.write("pareto_front.csv", pareto::to_csv(&env)?.as_bytes())?;
    run.write("front.svg", pareto::to_svg(&points, &env, metric).as_bytes())?;
    println!("front: {} of {} points on the envelope", env.len(), points.len());
    run.finish(&cfg)
}

fn cmd_oracle(mut cfg: RunConfig, instances: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = instances {
        cfg.oracle.instances = n;
    }
    let grid: SweepGrid = cfg.sweep.grid(1.0)?;
    let cert = certify(cfg.oracle.instances, cfg.seed, &grid, cfg.jobs)?;
    let mut run = Run::start(&cfg, "oracle")?;
    run.write("certificate.json", serde_json::to_string_pretty(&cert)?.as_bytes())?;
    println!(
        "oracle: {} instances, {} violations, max eps_grid {:.4} (limit {}), {}",
        cert.containment.len(),
        cert.total_violations,
        cert.max_eps_grid,
        cfg.oracle.eps_limit,
        if cert.passed(cfg.oracle.eps_limit) { "within limit" } else { "eps above limit" }
    );
    run.finish(&cfg)?;
    if cert.total_violations > 0 {
        return Err(Violations(cert.total_violations).into());
    }
    Ok(())
}

fn cmd_eval(cfg: RunConfig, encoder: Option<PathBuf>, agent: Option<PathBuf>) -> anyhow::Result<()> {
    let mut run = Run::start(&cfg, "eval")?;
    let enc = load_encoder(&mut run, &encoder_path(&cfg, encoder))?;
    let agent_path = agent.unwrap_or_else(|| cfg.output_dir.join("train").join("agent.json"));
    if !agent_path.is_file() {
        bail!("agent checkpoint {} not found; run `panelrl train` first", agent_path.display());
    }
    run.input(&agent_path)?;
    let agent: AgentCheckpoint = load_checkpoint(&agent_path, AGENT_KIND)?;
    let data = cfg.load_data()?;
    let env_cfg = cfg.env_config(data.scheme.clone(), ShapingParams::new(agent.lambda, agent.rho)?);
    let embedder = StateEmbedder::new(enc, Arc::new(agent.classifier), agent.classifier_version)?;
    let report = evaluate(&agent.policy, &embedder, data.test(), &env_cfg)?;
    run.write("eval.json", serde_json::to_string_pretty(&report)?.as_bytes())?;
    println!("eval: test f1 {:.4} mean cost {:.2}", report.f1(), report.tally.mean_cost);
    run.finish(&cfg)
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenData { cfg } => gen_data(settings::resolve(&cfg)?),
        Command::Pretrain { cfg } => cmd_pretrain(settings::resolve(&cfg)?),
        Command::Train { cfg, lambda, rho, encoder } => cmd_train(settings::resolve(&cfg)?, lambda, rho, encoder),
        Command::Sweep { cfg, encoder } => cmd_sweep(settings::resolve(&cfg)?, encoder),
        Command::Front { cfg, input, metric } => cmd_front(settings::resolve(&cfg)?, input, metric),
        Command::Oracle { cfg, instances } => cmd_oracle(settings::resolve(&cfg)?, instances),
        Command::Eval { cfg, encoder, agent } => cmd_eval(settings::resolve(&cfg)?, encoder, agent),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else if e.is::<Violations>() {
                ExitCode::from(3)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
