use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use divtc::{ExperimentConfig, SeedRun, Workspace};

#[derive(Parser)]
#[command(name = "divtc", version, about = "Train and evaluate diversity-regularized model collections")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate and cache datasets only.
    Generate(Opts),
    /// Train every seed and write metrics and checkpoints.
    Train(Opts),
    /// Evaluate existing checkpoints with all three protocols.
    Evaluate(Opts),
    /// Full pipeline: generate, train, evaluate, report.
    Run(Opts),
    /// Aggregate the evaluation files already in --out.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
}

#[derive(Args)]
struct Opts {
    /// key = value config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    n_models: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    overwrite: bool,
}

impl Opts {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k.to_string(), v));
            }
        };
        put("variant", self.variant.clone());
        put("method", self.method.clone());
        put("n_models", self.n_models.map(|v| v.to_string()));
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("seeds", self.seed.map(|v| v.to_string()));
        put("output_dir", self.out.as_ref().map(|p| p.display().to_string()));
        put("workers", self.workers.map(|v| v.to_string()));
        put("mnist_dir", self.mnist_dir.as_ref().map(|p| p.display().to_string()));
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got {kv:?}"))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path, &pairs)?,
            None => ExperimentConfig::from_pairs(&pairs)?,
        };
        Ok(cfg)
    }
}

fn failures<T>(runs: &[SeedRun<T>]) -> usize {
    runs.iter()
        .filter(|r| match &r.result {
            Ok(_) => false,
            Err(e) => {
                eprintln!("seed {} failed: {e:#}", r.seed);
                true
            }
        })
        .count()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.verb {
        Verb::Generate(o) => {
            let runs = divtc::generate_datasets(&o.resolve()?)?;
            for r in &runs {
                if let Ok(paths) = &r.result {
                    for p in paths {
                        println!("{}", p.display());
                    }
                }
            }
            Ok(failures(&runs) == 0)
        }
        Verb::Train(o) => {
            let runs = divtc::train_seeds(&o.resolve()?, o.overwrite)?;
            Ok(failures(&runs) == 0)
        }
        Verb::Evaluate(o) => {
            let runs = divtc::evaluate_seeds(&o.resolve()?, o.overwrite)?;
            Ok(failures(&runs) == 0)
        }
        Verb::Run(o) => {
            let outcome = divtc::run_experiment(&o.resolve()?, o.overwrite)?;
            print!("{}", outcome.table.to_text());
            Ok(outcome.succeeded())
        }
        Verb::Report { out, overwrite } => {
            let outcome = divtc::report_existing(&Workspace::new(out), overwrite)?;
            print!("{}", outcome.table.to_text());
            for f in &outcome.manifest.failures {
                eprintln!("seed {} missing: {}", f.seed, f.error);
            }
            Ok(outcome.succeeded())
        }
    }
}
