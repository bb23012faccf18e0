//! Experiment runner: configuration, per-seed orchestration, aggregation and reports.

pub mod config;
pub mod pipeline;
pub mod report;

use anyhow::{bail, Result};
use divtc_core::eval::SeedEvaluation;
use log::{error, info};

pub use config::{ConfigError, ExperimentConfig, Method, MNIST_ENV};
pub use pipeline::{for_each_seed, Mnist, SeedData, SeedRun, Workspace};
pub use report::{aggregate_runs, emit_reports, Manifest, ResultRow, ResultsTable, SeedFailure};

/// Results table plus the manifest describing how it was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub table: ResultsTable,
    pub manifest: Manifest,
}

impl RunOutcome {
    pub fn succeeded(&self) -> bool {
        self.manifest.failures.is_empty()
    }
}

/// Splits seed runs into successes and failure rows, recording timings.
fn settle<T>(runs: Vec<SeedRun<T>>, manifest: &mut Manifest) -> Vec<T> {
    let mut ok = Vec::new();
    for run in runs {
        manifest.seconds.insert(run.seed, run.seconds);
        match run.result {
            Ok(v) => {
                manifest.completed.push(run.seed);
                ok.push(v);
            }
            Err(e) => {
                error!("seed {} failed: {e:#}", run.seed);
                manifest.failures.push(SeedFailure {
                    seed: run.seed,
                    error: format!("{e:#}"),
                });
            }
        }
    }
    ok
}

fn refuse_reports(ws: &Workspace, overwrite: bool) -> Result<()> {
    if overwrite {
        return Ok(());
    }
    for p in [ws.results_csv(), ws.manifest()] {
        if p.exists() {
            bail!("{} already exists; pass --overwrite to replace it", p.display());
        }
    }
    Ok(())
}

/// The full pipeline for every seed: generate, train, evaluate, then aggregate.
/// Seeds that fail become failure rows in the manifest; the rest still report.
pub fn run_experiment(cfg: &ExperimentConfig, overwrite: bool) -> Result<RunOutcome> {
    let ws = Workspace::new(&cfg.output_dir);
    refuse_reports(&ws, overwrite)?;
    ws.claim(cfg, overwrite)?;
    let mnist = Mnist::load(cfg)?;
    let mut manifest = Manifest::new(cfg);
    let runs = for_each_seed(&cfg.seeds, cfg.workers, |seed| {
        info!("seed {seed}: generating data");
        let data = SeedData::generate(cfg, &mnist, seed)?;
        pipeline::train_seed(cfg, &data, seed, &ws, overwrite)?;
        pipeline::evaluate_seed(cfg, &data, seed, &ws, overwrite)
    });
    let evals: Vec<SeedEvaluation> = settle(runs, &mut manifest).into_iter().flatten().collect();
    let table = aggregate_runs(cfg.method, cfg.n_models, &evals);
    emit_reports(&table, &manifest, &ws.root, overwrite)?;
    Ok(RunOutcome { table, manifest })
}

/// Writes every seed's datasets under `<out>/datasets`.
pub fn generate_datasets(cfg: &ExperimentConfig) -> Result<Vec<SeedRun<Vec<std::path::PathBuf>>>> {
    let ws = Workspace::new(&cfg.output_dir);
    let mnist = Mnist::load(cfg)?;
    let dir = ws.dataset_dir();
    Ok(for_each_seed(&cfg.seeds, cfg.workers, |seed| {
        pipeline::generate_seed(cfg, &mnist, seed, &dir)
    }))
}

/// Training only: metrics and checkpoints per seed.
pub fn train_seeds(cfg: &ExperimentConfig, overwrite: bool) -> Result<Vec<SeedRun<()>>> {
    let ws = Workspace::new(&cfg.output_dir);
    ws.claim(cfg, overwrite)?;
    let mnist = Mnist::load(cfg)?;
    Ok(for_each_seed(&cfg.seeds, cfg.workers, |seed| {
        let data = SeedData::generate(cfg, &mnist, seed)?;
        pipeline::train_seed(cfg, &data, seed, &ws, overwrite)
    }))
}

/// Evaluation only, from checkpoints already in the output directory.
pub fn evaluate_seeds(cfg: &ExperimentConfig, overwrite: bool) -> Result<Vec<SeedRun<Vec<SeedEvaluation>>>> {
    let ws = Workspace::new(&cfg.output_dir);
    ws.claim(cfg, overwrite)?;
    let mnist = Mnist::load(cfg)?;
    Ok(for_each_seed(&cfg.seeds, cfg.workers, |seed| {
        let data = SeedData::generate(cfg, &mnist, seed)?;
        pipeline::evaluate_seed(cfg, &data, seed, &ws, overwrite)
    }))
}

/// Aggregates the evaluation files already in `ws`. Configured seeds without
/// one are reported as failures.
pub fn report_existing(ws: &Workspace, overwrite: bool) -> Result<RunOutcome> {
    refuse_reports(ws, overwrite)?;
    let cfg = ws.stored_config()?;
    let found = ws.evaluated_seeds()?;
    let mut manifest = Manifest::new(&cfg);
    let mut evals = Vec::new();
    for &seed in &cfg.seeds {
        if !found.contains(&seed) {
            manifest.failures.push(SeedFailure {
                seed,
                error: "no evaluation file".into(),
            });
            continue;
        }
        match pipeline::read_evaluation(ws, seed) {
            Ok(e) => {
                manifest.completed.push(seed);
                evals.extend(e);
            }
            Err(e) => manifest.failures.push(SeedFailure {
                seed,
                error: format!("{e:#}"),
            }),
        }
    }
    let table = aggregate_runs(cfg.method, cfg.n_models, &evals);
    emit_reports(&table, &manifest, &ws.root, overwrite)?;
    Ok(RunOutcome { table, manifest })
}
