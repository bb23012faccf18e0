//! Aggregation across seeds and the files a run leaves behind.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use divtc_core::data::Shift;
use divtc_core::eval::{EvalReport, Protocol, SeedEvaluation};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub n_models: usize,
    pub protocol: Protocol,
    pub condition: String,
    /// Test accuracy as a fraction.
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub sd: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

const CSV_HEADER: &str = "method,n_models,protocol,condition,mean_accuracy,sd,n_seeds";

impl ResultsTable {
    pub fn get(&self, condition: &str, protocol: Protocol) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.condition == condition && r.protocol == protocol)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.method, r.n_models, r.protocol, r.condition, r.mean, r.sd, r.n_seeds
            );
        }
        s
    }

    /// Human-readable table in percentage points.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<17} {:>3} {:<9} {:<13} {:>14} {:>5}\n",
            "method", "n", "protocol", "condition", "accuracy (sd)", "seeds"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<17} {:>3} {:<9} {:<13} {:>7.1} ({:>4.1}) {:>5}",
                r.method.to_string(),
                r.n_models,
                r.protocol.to_string(),
                r.condition,
                100.0 * r.mean,
                100.0 * r.sd,
                r.n_seeds
            );
        }
        s
    }
}

/// Mean and population s.d. of test accuracy per (condition, protocol).
pub fn aggregate_runs(method: Method, n_models: usize, evals: &[SeedEvaluation]) -> ResultsTable {
    let report = EvalReport::from_seeds(evals);
    ResultsTable {
        rows: report
            .summaries
            .into_iter()
            .map(|s| ResultRow {
                method,
                n_models,
                protocol: s.protocol,
                condition: s.condition,
                mean: s.mean,
                sd: s.sd,
                n_seeds: s.seeds.len(),
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

/// Everything needed to trace a results row back to its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub code_version: String,
    pub config_hash: String,
    /// Dataset cache keys as `seed_NNNN/condition`; condition `none` is the training set.
    pub dataset_hashes: BTreeMap<String, String>,
    pub config: String,
    pub seeds: Vec<u64>,
    pub completed: Vec<u64>,
    pub failures: Vec<SeedFailure>,
    /// Wall-clock seconds per seed; the only nondeterministic field.
    pub seconds: BTreeMap<u64, f64>,
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let mut dataset_hashes = BTreeMap::new();
        for &seed in &cfg.seeds {
            for shift in std::iter::once(Shift::None).chain(cfg.conditions()) {
                let g = cfg.generator(seed, shift);
                dataset_hashes.insert(format!("seed_{seed:04}/{shift}"), g.config_hash(cfg.variant));
            }
        }
        Self {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: cfg.config_hash(),
            dataset_hashes,
            config: cfg.canonical(),
            seeds: cfg.seeds.clone(),
            completed: Vec::new(),
            failures: Vec::new(),
            seconds: BTreeMap::new(),
        }
    }
}

/// Writes `results.csv` and `manifest.json` into `dir`. Refuses to replace
/// either unless `overwrite` is set.
pub fn emit_reports(table: &ResultsTable, manifest: &Manifest, dir: &Path, overwrite: bool) -> Result<()> {
    let csv = dir.join("results.csv");
    let man = dir.join("manifest.json");
    if !overwrite {
        for p in [&csv, &man] {
            if p.exists() {
                bail!("{} already exists; pass --overwrite to replace it", p.display());
            }
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(&csv, table.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    let text = serde_json::to_string_pretty(manifest)? + "\n";
    fs::write(&man, text).with_context(|| format!("writing {}", man.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use divtc_core::eval::{Choice, ProtocolOutcome};

    fn eval(seed: u64, acc: [f64; 3]) -> SeedEvaluation {
        SeedEvaluation {
            seed,
            condition: "digit_only".into(),
            outcomes: Protocol::ALL
                .iter()
                .zip(acc)
                .map(|(&protocol, a)| ProtocolOutcome {
                    protocol,
                    val_accuracy: a,
                    test_accuracy: a,
                    choice: Choice::L2(0.0),
                })
                .collect(),
        }
    }

    #[test]
    fn single_seed_has_zero_spread() {
        let t = aggregate_runs(Method::Erm, 1, &[eval(0, [0.5, 0.6, 0.7])]);
        assert_eq!(t.rows.len(), 3);
        assert!(t.rows.iter().all(|r| r.sd == 0.0 && r.n_seeds == 1));
    }

    #[test]
    fn two_seeds_mean_and_population_sd() {
        let t = aggregate_runs(Method::ConditionalTc, 2, &[eval(0, [0.6; 3]), eval(1, [0.8; 3])]);
        let r = t.get("digit_only", Protocol::Linear).unwrap();
        assert!((r.mean - 0.7).abs() < 1e-12);
        assert!((r.sd - 0.1).abs() < 1e-12);
        assert_eq!(r.n_seeds, 2);
    }

    #[test]
    fn identical_seeds_have_zero_spread() {
        let evals: Vec<_> = (0..10).map(|s| eval(s, [0.65, 0.7, 0.72])).collect();
        let t = aggregate_runs(Method::ConditionalTc, 2, &evals);
        assert!(t.rows.iter().all(|r| r.sd == 0.0 && r.n_seeds == 10));
    }

    #[test]
    fn csv_has_one_line_per_row() {
        let t = aggregate_runs(Method::Erm, 1, &[eval(0, [0.5, 0.6, 0.7])]);
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[3], "erm,1,linear,digit_only,0.7,0,1");
    }

    #[test]
    fn refuses_to_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::defaults(divtc_core::data::Variant::CMnist);
        let t = aggregate_runs(Method::Erm, 1, &[eval(0, [0.5, 0.6, 0.7])]);
        let m = Manifest::new(&cfg);
        emit_reports(&t, &m, dir.path(), false).unwrap();
        assert!(emit_reports(&t, &m, dir.path(), false).is_err());
        emit_reports(&t, &m, dir.path(), true).unwrap();
    }

    #[test]
    fn manifest_carries_dataset_hashes() {
        let cfg = ExperimentConfig::defaults(divtc_core::data::Variant::TcMnist);
        let m = Manifest::new(&cfg);
        let g = cfg.generator(3, Shift::None);
        assert_eq!(m.dataset_hashes["seed_0003/none"], g.config_hash(cfg.variant));
        assert!(m.dataset_hashes.contains_key("seed_0009/colour2_only"));
        assert_eq!(m.dataset_hashes.len(), 30);
        assert_eq!(m.config_hash, cfg.config_hash());
    }
}
