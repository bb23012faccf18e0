//! Per-seed stages: generate data, train, evaluate. Seeds run on a small
//! pool of worker threads; each seed only reads shared MNIST digits and
//! writes into its own directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use divtc_core::data::{
    load_mnist, make_shifted_testset, make_train, ColoredDataset, MnistSplit,
    RawDigits, Shift, ShiftedSplits,
};
use divtc_core::data::cache::{cache_path, save_dataset};
use divtc_core::eval::{evaluate_protocols, SeedEvaluation};
use divtc_core::nets::{load_checkpoint, save_checkpoint, Checkpoint};
use divtc_core::train::{train_collection, TrainError, ValidationTarget};
use log::info;

use crate::config::ExperimentConfig;

/// File layout of one output directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config_file(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn results_csv(&self) -> PathBuf {
        self.root.join("results.csv")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join("datasets")
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed_{seed:04}"))
    }

    pub fn metrics(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("metrics.jsonl")
    }

    pub fn checkpoint(&self, seed: u64, condition: Shift) -> PathBuf {
        self.seed_dir(seed).join(format!("checkpoint_{condition}.bin"))
    }

    pub fn final_checkpoint(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("final.bin")
    }

    pub fn evaluation(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("evaluation.json")
    }

    /// Seeds with an evaluation file, in ascending order.
    pub fn evaluated_seeds(&self) -> Result<Vec<u64>> {
        let mut seeds = Vec::new();
        let entries = match fs::read_dir(&self.root) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(seeds),
            Err(e) => return Err(e).with_context(|| format!("reading {}", self.root.display())),
        };
        for entry in entries {
            let name = entry?.file_name();
            let Some(s) = name.to_str().and_then(|n| n.strip_prefix("seed_")) else {
                continue;
            };
            if let Ok(seed) = s.parse::<u64>() {
                if self.evaluation(seed).is_file() {
                    seeds.push(seed);
                }
            }
        }
        seeds.sort_unstable();
        Ok(seeds)
    }

    /// Writes the canonical config, refusing to mix configs in one directory.
    pub fn claim(&self, cfg: &ExperimentConfig, overwrite: bool) -> Result<()> {
        fs::create_dir_all(&self.root).with_context(|| format!("creating {}", self.root.display()))?;
        let path = self.config_file();
        let text = cfg.canonical();
        if let Ok(existing) = fs::read_to_string(&path) {
            if existing != text && !overwrite {
                bail!(
                    "{} holds a different config; pass --overwrite or pick another --out",
                    self.root.display()
                );
            }
        }
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    /// Reads back the config written by [`Workspace::claim`].
    pub fn stored_config(&self) -> Result<ExperimentConfig> {
        let path = self.config_file();
        let cfg = ExperimentConfig::load(&path, &[]).with_context(|| format!("loading {}", path.display()))?;
        Ok(ExperimentConfig {
            output_dir: self.root.clone(),
            ..cfg
        })
    }
}

fn refuse_existing(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        bail!("{} already exists; pass --overwrite to replace it", path.display());
    }
    Ok(())
}

/// MNIST digits shared by every seed.
#[derive(Debug)]
pub struct Mnist {
    pub train: RawDigits,
    pub test: RawDigits,
}

impl Mnist {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let dir = cfg.resolve_mnist_dir()?;
        let train = load_mnist(&dir, MnistSplit::Train).context("loading MNIST training images")?;
        let test = load_mnist(&dir, MnistSplit::Test).context("loading MNIST test images")?;
        if train.len() < cfg.train_size {
            bail!("train_size {} exceeds the {} MNIST training images", cfg.train_size, train.len());
        }
        Ok(Self {
            train: train.take(cfg.train_size),
            test,
        })
    }
}

/// One seed's training set and shifted test distributions.
#[derive(Debug)]
pub struct SeedData {
    pub train: ColoredDataset,
    pub shifted: Vec<ShiftedSplits>,
}

impl SeedData {
    pub fn generate(cfg: &ExperimentConfig, mnist: &Mnist, seed: u64) -> Result<Self> {
        let train = make_train(cfg.variant, &mnist.train, &cfg.generator(seed, Shift::None))?;
        let shifted = cfg
            .conditions()
            .into_iter()
            .map(|s| make_shifted_testset(cfg.variant, &mnist.test, &cfg.generator(seed, s)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { train, shifted })
    }

    pub fn targets(&self) -> Vec<(String, &ShiftedSplits)> {
        self.shifted.iter().map(|s| (s.shift.to_string(), s)).collect()
    }
}

/// Writes one seed's datasets into the cache directory and returns their paths.
pub fn generate_seed(cfg: &ExperimentConfig, mnist: &Mnist, seed: u64, dir: &Path) -> Result<Vec<PathBuf>> {
    let data = SeedData::generate(cfg, mnist, seed)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    let mut put = |ds: &ColoredDataset, shift: Shift| -> Result<()> {
        let path = cache_path(dir, cfg.variant, ds.role, &cfg.generator(seed, shift));
        save_dataset(&path, ds).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
        Ok(())
    };
    put(&data.train, Shift::None)?;
    for s in &data.shifted {
        put(&s.adapt_train, s.shift)?;
        put(&s.adapt_val, s.shift)?;
        put(&s.adapt_test, s.shift)?;
    }
    Ok(written)
}

/// Trains one seed, streaming per-epoch metrics, then writes the best
/// checkpoint per test condition and the final state.
pub fn train_seed(cfg: &ExperimentConfig, data: &SeedData, seed: u64, ws: &Workspace, overwrite: bool) -> Result<()> {
    let dir = ws.seed_dir(seed);
    refuse_existing(&ws.metrics(seed), overwrite)?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let named = data.targets();
    let targets: Vec<ValidationTarget> = named
        .iter()
        .map(|(name, s)| ValidationTarget {
            condition: name,
            adapt_train: &s.adapt_train,
            adapt_val: &s.adapt_val,
        })
        .collect();
    let metrics_path = ws.metrics(seed);
    let mut out = BufWriter::new(File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?);
    let mut write_err = None;
    let tcfg = cfg.train_config(seed);
    let result = train_collection(&data.train, &targets, &tcfg, |rec| {
        let line = serde_json::to_string(rec).expect("records serialize");
        if let Err(e) = writeln!(out, "{line}").and_then(|_| out.flush()) {
            write_err.get_or_insert(e);
        }
        let val: Vec<String> = rec.validation.iter().map(|v| format!("{} {:.3}", v.condition, v.linear)).collect();
        info!(
            "seed {seed} epoch {} loss {:?} tc {:?} val [{}]",
            rec.epoch,
            rec.train_loss,
            rec.tc_hat,
            val.join(", ")
        );
    });
    if let Some(e) = write_err {
        return Err(e).with_context(|| format!("writing {}", metrics_path.display()));
    }
    let state = match result {
        Ok(s) => s,
        Err(TrainError::NonFinite { what, epoch, step, .. }) => {
            bail!("seed {seed}: non-finite {what} at epoch {epoch}, step {step}")
        }
        Err(e) => return Err(e).with_context(|| format!("training seed {seed}")),
    };
    let hash = cfg.config_hash();
    for (shift, (name, _)) in cfg.conditions().into_iter().zip(&named) {
        let best = state
            .best_for(name)
            .with_context(|| format!("no checkpoint recorded for {name}"))?;
        let ck = Checkpoint {
            collection: best.collection.clone(),
            critic: None,
            config_hash: hash.clone(),
            epoch: best.epoch,
            val_accuracy: best.val_accuracy,
        };
        save_checkpoint(&ws.checkpoint(seed, shift), &ck)?;
    }
    let last = Checkpoint {
        collection: state.collection.clone(),
        critic: state.critic.clone(),
        config_hash: hash,
        epoch: state.epoch,
        val_accuracy: state
            .records
            .last()
            .and_then(|r| r.validation.first())
            .map_or(f64::NAN, |v| v.linear),
    };
    save_checkpoint(&ws.final_checkpoint(seed), &last)?;
    Ok(())
}

/// Scores each condition's best checkpoint with all three protocols.
pub fn evaluate_seed(
    cfg: &ExperimentConfig,
    data: &SeedData,
    seed: u64,
    ws: &Workspace,
    overwrite: bool,
) -> Result<Vec<SeedEvaluation>> {
    refuse_existing(&ws.evaluation(seed), overwrite)?;
    let hash = cfg.config_hash();
    let mut evals = Vec::new();
    for splits in &data.shifted {
        let path = ws.checkpoint(seed, splits.shift);
        let ck = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
        if ck.config_hash != hash {
            bail!("{} was trained under config {}, not {hash}", path.display(), ck.config_hash);
        }
        evals.push(evaluate_protocols(&ck.collection, splits, seed, &splits.shift.to_string())?);
    }
    let path = ws.evaluation(seed);
    let text = serde_json::to_string_pretty(&evals)?;
    fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(evals)
}

pub fn read_evaluation(ws: &Workspace, seed: u64) -> Result<Vec<SeedEvaluation>> {
    let path = ws.evaluation(seed);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Outcome of one seed's job.
#[derive(Debug)]
pub struct SeedRun<T> {
    pub seed: u64,
    pub seconds: f64,
    pub result: Result<T>,
}

/// Runs `job` for every seed on up to `workers` threads. Results come back
/// in seed order regardless of completion order.
pub fn for_each_seed<T: Send>(seeds: &[u64], workers: usize, job: impl Fn(u64) -> Result<T> + Sync) -> Vec<SeedRun<T>> {
    let next = AtomicUsize::new(0);
    let done = Mutex::new(Vec::with_capacity(seeds.len()));
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, seeds.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&seed) = seeds.get(i) else { break };
                let start = Instant::now();
                let result = job(seed);
                let run = SeedRun {
                    seed,
                    seconds: start.elapsed().as_secs_f64(),
                    result,
                };
                done.lock().expect("no poisoned workers").push((i, run));
            });
        }
    });
    let mut done = done.into_inner().expect("no poisoned workers");
    done.sort_by_key(|(i, _)| *i);
    done.into_iter().map(|(_, r)| r).collect()
}
