//! MNIST ingestion and the coloured variants built from it.
//!
//! Every generated example keeps its provenance (digit group, clean label,
//! colour bits, common-cause bit) so the strength of each predictive signal
//! can be measured directly on the generated set.

pub mod cache;
mod generate;
mod idx;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diffengine::{EngineError, Tensor};

pub use generate::{
    dataset_stats, make_cmnist_train, make_rcmnist_train, make_shifted_testset, make_tcmnist_train,
    make_train, pool_2x2, rotate90, synthetic_digits, DatasetStats, ShiftedSplits, ADAPT_TEST_SIZE, ADAPT_TRAIN_SIZE,
    ADAPT_VAL_SIZE, SHIFTED_POOL_SIZE,
};
pub use idx::{load_mnist, parse_idx, IdxData, MnistSplit, IMAGES_MAGIC, LABELS_MAGIC};

pub const SIDE: usize = 14;
pub const PLANE: usize = SIDE * SIDE;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unexpected magic 0x{found:08x} at byte offset {offset}")]
    BadMagic { found: u32, offset: usize },
    #[error("truncated input: {offset} bytes available, {needed} required")]
    Truncated { offset: usize, needed: usize },
    #[error("dimension mismatch at byte offset {offset}: {detail}")]
    DimMismatch { offset: usize, detail: String },
    #[error("missing MNIST file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("raw digit set is empty")]
    Empty,
    #[error("need at least {needed} raw test examples, got {available}")]
    TooFewExamples { needed: usize, available: usize },
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("corrupt dataset cache: {0}")]
    BadCache(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Greyscale digits with their 0–9 classes.
#[derive(Debug, Clone)]
pub struct RawDigits {
    images: Tensor,
    digit_labels: Vec<u8>,
}

impl RawDigits {
    pub fn new(images: Tensor, digit_labels: Vec<u8>) -> Result<Self, DataError> {
        let n = match images.shape() {
            [n, 28, 28] => *n,
            other => {
                return Err(DataError::DimMismatch {
                    offset: 4,
                    detail: format!("expected Nx28x28 images, got {other:?}"),
                })
            }
        };
        if n != digit_labels.len() {
            return Err(DataError::DimMismatch {
                offset: 4,
                detail: format!("{n} images but {} labels", digit_labels.len()),
            });
        }
        if let Some(bad) = digit_labels.iter().find(|&&d| d > 9) {
            return Err(DataError::DimMismatch {
                offset: 8,
                detail: format!("digit label {bad} outside 0..9"),
            });
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DataError::InvalidConfig("pixel values outside [0,1]".into()));
        }
        Ok(Self {
            images,
            digit_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.digit_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.digit_labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images.data()[i * 784..(i + 1) * 784]
    }

    pub fn digit(&self, i: usize) -> u8 {
        self.digit_labels[i]
    }

    pub fn digit_labels(&self) -> &[u8] {
        &self.digit_labels
    }

    /// The first `n` digits (or all of them when fewer exist). Panics if `n == 0`.
    pub fn take(&self, n: usize) -> Self {
        assert!(n > 0, "take(0) would produce an empty digit set");
        let n = n.min(self.len());
        Self {
            images: Tensor::new(vec![n, 28, 28], self.images.data()[..n * 784].to_vec())
                .expect("prefix of a valid tensor"),
            digit_labels: self.digit_labels[..n].to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "cmnist")]
    CMnist,
    #[serde(rename = "rcmnist")]
    RcMnist,
    #[serde(rename = "tcmnist")]
    TcMnist,
}

impl Variant {
    pub fn channels(self) -> usize {
        match self {
            Variant::CMnist | Variant::RcMnist => 2,
            Variant::TcMnist => 3,
        }
    }

    pub fn input_dim(self) -> usize {
        self.channels() * PLANE
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        [Variant::CMnist, Variant::RcMnist, Variant::TcMnist].get(c as usize).copied()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::CMnist => "cmnist",
            Variant::RcMnist => "rcmnist",
            Variant::TcMnist => "tcmnist",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "cmnist" => Ok(Variant::CMnist),
            "rcmnist" => Ok(Variant::RcMnist),
            "tcmnist" => Ok(Variant::TcMnist),
            _ => Err(format!("unknown variant '{s}' (expected cmnist, rcmnist or tcmnist)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Train,
    AdaptTrain,
    AdaptVal,
    AdaptTest,
}

impl Role {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        [Role::Train, Role::AdaptTrain, Role::AdaptVal, Role::AdaptTest]
            .get(c as usize)
            .copied()
    }
}

/// Which training-time signal survives in a shifted test set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shift {
    None,
    DigitOnly,
    Colour2Only,
}

impl fmt::Display for Shift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Shift::None => "none",
            Shift::DigitOnly => "digit_only",
            Shift::Colour2Only => "colour2_only",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub label_flip_prob: f64,
    pub colour_flip_probs_per_env: Vec<f64>,
    pub colour2_flip_prob: f64,
    pub rotation_flip_prob: f64,
    pub shift: Shift,
    pub rng_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            label_flip_prob: 0.25,
            colour_flip_probs_per_env: vec![0.1, 0.2],
            colour2_flip_prob: 0.25,
            rotation_flip_prob: 0.5,
            shift: Shift::None,
            rng_seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let probs = [self.label_flip_prob, self.colour2_flip_prob, self.rotation_flip_prob]
            .into_iter()
            .chain(self.colour_flip_probs_per_env.iter().copied());
        for p in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(DataError::InvalidConfig(format!("probability {p} outside [0,1]")));
            }
        }
        if self.colour_flip_probs_per_env.is_empty() {
            return Err(DataError::InvalidConfig("no colour environments".into()));
        }
        Ok(())
    }

    /// Hex digest identifying the generated data for this variant and config.
    pub fn config_hash(&self, variant: Variant) -> String {
        let canonical = serde_json::to_string(&(variant, self)).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Provenance {
    /// 0 for digits 0–4, 1 for 5–9.
    pub digit_group: u8,
    pub clean_label: u8,
    pub colour_bit: u8,
    pub colour2_bit: Option<u8>,
    pub common_cause_bit: Option<u8>,
}

/// One generated example: flattened `C×14×14` input, corrupted label, provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ColoredExample {
    pub input: Tensor,
    pub label: u8,
    pub provenance: Provenance,
}

/// A generated dataset stored column-wise: an `N×(C·196)` input matrix, labels
/// and per-example provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ColoredDataset {
    pub variant: Variant,
    pub role: Role,
    pub rng_seed: u64,
    pub inputs: Tensor,
    pub labels: Vec<u8>,
    pub provenance: Vec<Provenance>,
}

impl ColoredDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.variant.channels()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn example(&self, i: usize) -> ColoredExample {
        ColoredExample {
            input: Tensor::vector(self.inputs.row(i).to_vec()),
            label: self.labels[i],
            provenance: self.provenance[i],
        }
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    /// Inputs and labels for the listed rows.
    pub fn batch(&self, rows: &[usize]) -> Result<(Tensor, Vec<usize>), DataError> {
        let x = self.inputs.select_rows(rows)?;
        let y = rows.iter().map(|&r| self.labels[r] as usize).collect();
        Ok((x, y))
    }

    /// A new dataset made of the listed rows, with the given role.
    pub fn subset(&self, rows: &[usize], role: Role) -> Result<Self, DataError> {
        Ok(Self {
            variant: self.variant,
            role,
            rng_seed: self.rng_seed,
            inputs: self.inputs.select_rows(rows)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            provenance: rows.iter().map(|&r| self.provenance[r]).collect(),
        })
    }
}
