//! Experiment configuration: plain `key = value` text with command-line overrides.
//!
//! Defaults depend on the variant (TC-MNIST trains for 500 epochs with five
//! critic steps per model step), so the variant is resolved before any other key.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use divtc_core::data::{GeneratorConfig, Shift, Variant};
use divtc_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MNIST_ENV: &str = "DIVTC_MNIST_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {detail}")]
    Value { key: String, detail: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ConditionalTc,
    UnconditionalTc,
    Erm,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::ConditionalTc, Method::UnconditionalTc, Method::Erm];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::ConditionalTc => "conditional_tc",
            Method::UnconditionalTc => "unconditional_tc",
            Method::Erm => "erm",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| format!("unknown method {s:?} (conditional_tc, unconditional_tc, erm)"))
    }
}

/// A fully resolved experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub method: Method,
    pub n_models: usize,
    pub seeds: Vec<u64>,
    pub beta: f64,
    pub batch_size: usize,
    pub m: usize,
    pub epochs: usize,
    pub critic_steps_per_model_step: usize,
    pub lr: f64,
    pub label_flip_prob: f64,
    pub colour_flip_probs_per_env: Vec<f64>,
    pub colour2_flip_prob: f64,
    pub rotation_flip_prob: f64,
    /// Leading MNIST training images used for the training set.
    pub train_size: usize,
    pub mnist_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub workers: usize,
}

impl ExperimentConfig {
    pub fn defaults(variant: Variant) -> Self {
        let t = TrainConfig::for_variant(variant);
        let g = GeneratorConfig::default();
        Self {
            variant,
            method: Method::ConditionalTc,
            n_models: 2,
            seeds: (0..10).collect(),
            beta: t.beta,
            batch_size: t.batch_size,
            m: t.m,
            epochs: t.epochs,
            critic_steps_per_model_step: t.critic_steps_per_model_step,
            lr: t.lr,
            label_flip_prob: g.label_flip_prob,
            colour_flip_probs_per_env: g.colour_flip_probs_per_env,
            colour2_flip_prob: g.colour2_flip_prob,
            rotation_flip_prob: g.rotation_flip_prob,
            train_size: 50_000,
            mnist_dir: None,
            output_dir: PathBuf::from("runs"),
            workers: 1,
        }
    }

    /// Builds a config from `key = value` pairs, later pairs winning.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (k, v) in pairs {
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let variant = match map.remove("variant") {
            Some(v) => parse("variant", &v)?,
            None => Variant::CMnist,
        };
        let mut cfg = Self::defaults(variant);
        for (k, v) in &map {
            cfg.set(k, v)?;
        }
        cfg.finish()
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "method" => self.method = v.parse().map_err(|e| value_err(key, e))?,
            "n_models" => self.n_models = parse(key, v)?,
            "seeds" => self.seeds = parse_seeds(v).map_err(|e| value_err(key, e))?,
            "beta" => self.beta = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "m" => self.m = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "critic_steps_per_model_step" => self.critic_steps_per_model_step = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "label_flip_prob" => self.label_flip_prob = parse(key, v)?,
            "colour_flip_probs_per_env" => {
                self.colour_flip_probs_per_env = v
                    .split(',')
                    .map(|p| parse(key, p.trim()))
                    .collect::<Result<_, _>>()?
            }
            "colour2_flip_prob" => self.colour2_flip_prob = parse(key, v)?,
            "rotation_flip_prob" => self.rotation_flip_prob = parse(key, v)?,
            "train_size" => self.train_size = parse(key, v)?,
            "mnist_dir" => self.mnist_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "output_dir" => self.output_dir = PathBuf::from(v),
            "workers" => self.workers = parse(key, v)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies the method's constraints and checks every derived config.
    fn finish(mut self) -> Result<Self, ConfigError> {
        if self.method == Method::Erm {
            self.n_models = 1;
            self.beta = 0.0;
        } else if self.n_models < 2 {
            return Err(ConfigError::Invalid(format!(
                "{} needs n_models >= 2, got {}",
                self.method, self.n_models
            )));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("seeds must be nonempty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(ConfigError::Invalid("seeds must be distinct".into()));
        }
        if self.workers == 0 {
            return Err(ConfigError::Invalid("workers must be >= 1".into()));
        }
        if self.train_size == 0 {
            return Err(ConfigError::Invalid("train_size must be >= 1".into()));
        }
        self.train_config(self.seeds[0])
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.generator(self.seeds[0], Shift::None)
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(self)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut pairs = parse_pairs(&text)?;
        pairs.extend_from_slice(overrides);
        Self::from_pairs(&pairs)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            n_models: self.n_models,
            beta: self.beta,
            batch_size: self.batch_size,
            m: self.m,
            epochs: self.epochs,
            critic_steps_per_model_step: self.critic_steps_per_model_step,
            lr: self.lr,
            conditional: self.method != Method::UnconditionalTc,
            rng_seed: seed,
        }
    }

    pub fn generator(&self, seed: u64, shift: Shift) -> GeneratorConfig {
        GeneratorConfig {
            label_flip_prob: self.label_flip_prob,
            colour_flip_probs_per_env: self.colour_flip_probs_per_env.clone(),
            colour2_flip_prob: self.colour2_flip_prob,
            rotation_flip_prob: self.rotation_flip_prob,
            shift,
            rng_seed: seed,
        }
    }

    /// Test conditions evaluated for this variant.
    pub fn conditions(&self) -> Vec<Shift> {
        match self.variant {
            Variant::TcMnist => vec![Shift::DigitOnly, Shift::Colour2Only],
            _ => vec![Shift::DigitOnly],
        }
    }

    /// MNIST directory from the config, else from the environment.
    pub fn resolve_mnist_dir(&self) -> Result<PathBuf, ConfigError> {
        self.mnist_dir
            .clone()
            .or_else(|| std::env::var_os(MNIST_ENV).map(PathBuf::from))
            .ok_or_else(|| ConfigError::Invalid(format!("no MNIST directory: set mnist_dir or {MNIST_ENV}")))
    }

    /// Canonical text of every setting that affects results. Workers, paths
    /// and the output directory are excluded.
    pub fn canonical(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let envs: Vec<String> = self.colour_flip_probs_per_env.iter().map(f64::to_string).collect();
        [
            ("variant", self.variant.to_string()),
            ("method", self.method.to_string()),
            ("n_models", self.n_models.to_string()),
            ("seeds", seeds.join(",")),
            ("beta", self.beta.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("m", self.m.to_string()),
            ("epochs", self.epochs.to_string()),
            ("critic_steps_per_model_step", self.critic_steps_per_model_step.to_string()),
            ("lr", self.lr.to_string()),
            ("label_flip_prob", self.label_flip_prob.to_string()),
            ("colour_flip_probs_per_env", envs.join(",")),
            ("colour2_flip_prob", self.colour2_flip_prob.to_string()),
            ("rotation_flip_prob", self.rotation_flip_prob.to_string()),
            ("train_size", self.train_size.to_string()),
        ]
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
    }

    pub fn config_hash(&self) -> String {
        Sha256::digest(self.canonical().as_bytes())
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn value_err(key: &str, detail: impl fmt::Display) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        detail: detail.to_string(),
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    v.parse().map_err(|e| value_err(key, e))
}

/// `a,b,c` or a half-open range `a..b`.
pub fn parse_seeds(v: &str) -> Result<Vec<u64>, String> {
    if let Some((a, b)) = v.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|e| format!("{e}"))?;
        let b: u64 = b.trim().parse().map_err(|e| format!("{e}"))?;
        return Ok((a..b).collect());
    }
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<u64>().map_err(|e| format!("{s:?}: {e}")))
        .collect()
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: raw.to_string(),
        })?;
        if k.trim().is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        }
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(text: &str) -> Vec<(String, String)> {
        parse_pairs(text).unwrap()
    }

    #[test]
    fn variant_drives_defaults() {
        let c = ExperimentConfig::from_pairs(&pairs("variant = tcmnist\nn_models = 3")).unwrap();
        assert_eq!((c.epochs, c.critic_steps_per_model_step), (500, 5));
        assert_eq!(c.conditions(), vec![Shift::DigitOnly, Shift::Colour2Only]);
        let c = ExperimentConfig::from_pairs(&[]).unwrap();
        assert_eq!((c.epochs, c.critic_steps_per_model_step, c.n_models), (250, 1, 2));
        assert_eq!(c.seeds, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn erm_forces_one_model() {
        let c = ExperimentConfig::from_pairs(&pairs("method = erm\nn_models = 4")).unwrap();
        assert_eq!((c.n_models, c.beta), (1, 0.0));
        assert!(!c.train_config(0).uses_critic());
    }

    #[test]
    fn later_pairs_override() {
        let mut p = pairs("epochs = 10 # short\nseeds = 0..3");
        p.push(("epochs".into(), "4".into()));
        let c = ExperimentConfig::from_pairs(&p).unwrap();
        assert_eq!(c.epochs, 4);
        assert_eq!(c.seeds, vec![0, 1, 2]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(parse_pairs("epochs 10"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(
            ExperimentConfig::from_pairs(&pairs("colour = red")),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_pairs(&pairs("epochs = many")),
            Err(ConfigError::Value { .. })
        ));
        assert!(ExperimentConfig::from_pairs(&pairs("n_models = 1")).is_err());
        assert!(ExperimentConfig::from_pairs(&pairs("seeds = 1,1")).is_err());
        assert!(ExperimentConfig::from_pairs(&pairs("seeds = ")).is_err());
    }

    #[test]
    fn canonical_text_round_trips() {
        let c = ExperimentConfig::from_pairs(&pairs("variant = rcmnist\nseeds = 3,7\nlr = 0.0001")).unwrap();
        let again = ExperimentConfig::from_pairs(&pairs(&c.canonical())).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.config_hash(), c.config_hash());
        let other = ExperimentConfig::from_pairs(&pairs("variant = rcmnist\nseeds = 3,7")).unwrap();
        assert_ne!(other.config_hash(), c.config_hash());
    }

    #[test]
    fn output_location_does_not_change_the_hash() {
        let a = ExperimentConfig::from_pairs(&pairs("output_dir = a\nworkers = 4")).unwrap();
        let b = ExperimentConfig::from_pairs(&pairs("output_dir = b")).unwrap();
        assert_eq!(a.config_hash(), b.config_hash());
    }
}
