use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use flowvar::config::ExperimentConfig;
use flowvar::experiment::{Experiment, TrainTarget, UqKind};
use flowvar::Error;

#[derive(Parser)]
#[command(name = "flowvar", version, about = "Posterior uncertainty for flow matching models")]
struct Cli {
    /// Config file path or preset name (gmm2d, gmm1, toy-bars, toy-blobs).
    #[arg(long, global = true, default_value = "gmm2d")]
    config: String,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainArg {
    Fm,
    #[value(alias = "onestep")]
    OneStep,
    Ensemble,
    McDropout,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Tweedie,
    #[value(alias = "one-step")]
    Onestep,
    Ensemble,
    McDropout,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model family, or every enabled one.
    Train {
        #[arg(value_enum, default_value = "all")]
        target: TrainArg,
    },
    /// Uncertainty for the held-out set with one method.
    Uq {
        #[arg(value_enum, default_value = "tweedie")]
        method: MethodArg,
        /// Evaluation time; defaults to the config value.
        #[arg(long)]
        t: Option<f64>,
    },
    /// Compare the closed form on the exact mixture field to the conjugate posterior.
    OracleCheck,
    /// Generate samples and record uncertainty along each trajectory.
    Traj {
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Corruption consistency table and clean error correlation.
    Consistency,
    /// Mean uncertainty across probe counts.
    AblateProbes {
        #[arg(long = "S", value_delimiter = ',', default_values_t = [1usize, 4, 16, 64, 256, 1024])]
        counts: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        replicates: usize,
    },
    /// Training and inference cost from earlier runs.
    Cost,
}

fn is_user_error(e: &anyhow::Error) -> bool {
    matches!(
        e.downcast_ref::<Error>(),
        Some(
            Error::Config(_)
                | Error::InvalidArgument(_)
                | Error::InvalidSpec(_)
                | Error::ModelNotFound(_)
                | Error::TimeRange(_)
                | Error::OpenInterval(_)
                | Error::DimensionMismatch { .. }
                | Error::NotIdx
                | Error::SizeMismatch { .. }
        )
    ) || e.downcast_ref::<UsageError>().is_some()
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = ExperimentConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let out = cli
        .out
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| PathBuf::from(format!("flowvar-out/seed{}", config.seed)));
    let exp = Experiment::new(config, &out).with_context(|| format!("preparing {}", out.display()))?;

    match cli.command {
        Command::Train { target } => {
            let methods = &exp.config.methods;
            let targets: Vec<TrainTarget> = match target {
                TrainArg::Fm => vec![TrainTarget::Fm],
                TrainArg::OneStep => vec![TrainTarget::OneStep],
                TrainArg::Ensemble => vec![TrainTarget::Ensemble],
                TrainArg::McDropout => vec![TrainTarget::McDropout],
                TrainArg::All => TrainTarget::ALL
                    .into_iter()
                    .filter(|t| match t {
                        TrainTarget::Fm => methods.tweedie_fm,
                        TrainTarget::OneStep => methods.tweedie_onestep,
                        TrainTarget::Ensemble => methods.ensemble >= 2,
                        TrainTarget::McDropout => methods.mc_dropout >= 2,
                    })
                    .collect(),
            };
            for t in targets {
                let rows = exp.train(t)?;
                let last = rows.iter().rfind(|r| r.metric == "epoch_loss");
                println!("trained {t:?}: final epoch loss {:.6}", last.and_then(|r| r.value).unwrap_or(f64::NAN));
            }
        }
        Command::Uq { method, t } => {
            let kind = match method {
                MethodArg::Tweedie => UqKind::Tweedie,
                MethodArg::Onestep => UqKind::OneStep,
                MethodArg::Ensemble => UqKind::Ensemble,
                MethodArg::McDropout => UqKind::McDropout,
            };
            let rows = exp.uq(kind, t)?;
            for metric in ["mean_trace", "prior_baseline"] {
                if let Some(r) = rows.iter().find(|r| r.metric == metric) {
                    println!("{} {metric} {:.6}", exp.method_label(kind), r.value.unwrap_or(f64::NAN));
                }
            }
        }
        Command::OracleCheck => {
            let check = exp.oracle_check()?;
            println!(
                "oracle check: max relative error {:.3e} over {} points ({})",
                check.max_error,
                check.points,
                if check.pass { "PASS" } else { "FAIL" }
            );
            if !check.pass {
                bail!("oracle check exceeded tolerance");
            }
        }
        Command::Traj { count } => {
            if count == 0 {
                return Err(UsageError("--count must be positive".into()).into());
            }
            let rows = exp.traj(count)?;
            println!("wrote {} trajectory rows", rows.len());
        }
        Command::Consistency => {
            for r in exp.consistency()? {
                let show = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
                println!(
                    "t={:.2} {:<16} pixel_spearman={} hitrate={:.4} sample_spearman={}",
                    r.t.value(),
                    r.method,
                    show(r.pixel_spearman),
                    r.hitrate,
                    show(r.sample_spearman)
                );
            }
        }
        Command::AblateProbes { counts, replicates } => {
            for r in exp.ablate_probes(&counts, replicates)? {
                let s = r.probes.map_or("exact".to_string(), |s| s.to_string());
                println!("S={s} {} {:.6}", r.metric, r.value.unwrap_or(f64::NAN));
            }
        }
        Command::Cost => {
            for (method, e) in exp.cost()?.entries() {
                println!(
                    "{method}: train {} fe, inference {} fe per sample",
                    e.train_forward_equivalents, e.inference_forward_equivalents
                );
            }
        }
    }
    println!("outputs in {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var("FLOWVAR_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_user_error(&e) { 1 } else { 2 })
        }
    }
}
