use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use xpe::bayes::PosteriorDocument;
use xpe::{decide, generate, infer_rank, infer_reward, ContextVector, PosteriorModel, SimConfig};
use xpe_cli::bench::{bench_worker, run_bench, Mode};
use xpe_cli::run::derive_seed;
use xpe_cli::{run_plan, AnalysisPlan, RunOptions};

#[derive(Parser)]
#[command(name = "xpe", version, about = "Randomized experiment analysis from declarative plans")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a plan and write the result document.
    Run {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; defaults to all cores, capped by the plan.
        #[arg(long)]
        parallelism: Option<usize>,
        /// Overrides the plan seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Embed wall-time and memory telemetry (breaks byte-identical output).
        #[arg(long)]
        telemetry: bool,
    },
    /// Sample an action for one context by Thompson sampling.
    Decide {
        /// Posterior document, or a result document holding posteriors.
        #[arg(long)]
        model: PathBuf,
        /// JSON object of covariate values.
        #[arg(long)]
        context: PathBuf,
        /// Metric to select when the model file holds several posteriors.
        #[arg(long)]
        metric: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = xpe::policy::DEFAULT_DRAWS)]
        draws: usize,
    },
    /// Compare naive and optimized execution of a plan.
    Bench {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic experiment.
    Simgen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the column-role schema.
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Where to write the ground truth.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    #[command(hide = true)]
    BenchWorker {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
    },
}

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn load_posterior(path: &Path, metric: Option<&str>) -> CliResult<PosteriorModel> {
    let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let docs: Vec<PosteriorDocument> = match value.get("posteriors") {
        Some(list) => serde_json::from_value(list.clone())?,
        None => vec![serde_json::from_value(value)?],
    };
    let chosen: Vec<PosteriorDocument> = docs
        .into_iter()
        .filter(|d| metric.is_none_or(|m| d.metric == m))
        .collect();
    match <[PosteriorDocument; 1]>::try_from(chosen) {
        Ok([doc]) => Ok(PosteriorModel::from_document(doc)?),
        Err(v) if v.is_empty() => Err("no posterior matches the requested metric".into()),
        Err(v) => Err(format!("{} posteriors match; pass --metric", v.len()).into()),
    }
}

#[derive(Serialize)]
struct Decision {
    action: i64,
    actions: Vec<i64>,
    p_best: Vec<f64>,
    seed: u64,
}

fn execute(cli: Cli) -> CliResult<ExitCode> {
    match cli.command {
        Command::Run {
            plan,
            out,
            parallelism,
            seed,
            telemetry,
        } => {
            let plan = AnalysisPlan::load(&plan)?;
            let mut doc = run_plan(&plan, &RunOptions { parallelism, seed })?;
            if let Some(t) = &doc.telemetry {
                log::info!(
                    "finished in {:.3}s, peak RSS {} bytes, {} worker(s)",
                    t.wall_seconds,
                    t.peak_rss_bytes,
                    t.parallelism
                );
            }
            if !telemetry {
                doc.telemetry = None;
            }
            std::fs::write(&out, doc.to_json() + "\n")?;
            let failed = doc.failed_jobs();
            if failed > 0 {
                eprintln!("{failed} of {} job unit(s) failed", doc.jobs.len());
                return Ok(ExitCode::from(1));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Decide {
            model,
            context,
            metric,
            seed,
            draws,
        } => {
            let post = load_posterior(&model, metric.as_deref())?;
            let ctx: ContextVector = serde_json::from_str(&std::fs::read_to_string(&context)?)?;
            let rewards = infer_reward(&post, &ctx, draws, derive_seed(seed, &["reward"]))?;
            let rank = infer_rank(&rewards, derive_seed(seed, &["rank"]));
            let action = decide(&rank, derive_seed(seed, &["decide"]));
            let decision = Decision {
                action,
                actions: rank.actions,
                p_best: rank.p_best,
                seed,
            };
            println!("{}", serde_json::to_string(&decision)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench { plan, out } => {
            AnalysisPlan::load(&plan)?;
            let exe = std::env::current_exe()?;
            let report = run_bench(&exe, &plan)?;
            let text = serde_json::to_string_pretty(&report)?;
            match out {
                Some(path) => std::fs::write(path, text + "\n")?,
                None => println!("{text}"),
            }
            Ok(if report.equal { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Simgen {
            config,
            out,
            schema,
            truth,
        } => {
            let config: SimConfig = serde_json::from_str(&std::fs::read_to_string(&config)?)?;
            let data = generate(&config)?;
            data.to_csv(&out)?;
            if let Some(path) = schema {
                write_json(&path, &data.schema)?;
            }
            if let Some(path) = truth {
                write_json(&path, &data.truth)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::BenchWorker { plan, mode } => {
            let plan = AnalysisPlan::load(&plan)?;
            let report = bench_worker(&plan, mode)?;
            println!("{}", serde_json::to_string(&report)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("XPE_LOG", "warn")).init();
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
