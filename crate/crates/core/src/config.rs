//! Experiment configuration, read from TOML.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::BlobsConfig;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::trainer::TrainConfig;

/// Which training scheme every client runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Algorithm {
    /// Mixed precision with Lasso, MSB pruning and server reallocation.
    FedMpq,
    /// Fixed precision, each client quantized at its own budget.
    Aqfl,
    /// Fixed precision, every client at the same bit-width.
    Fpq(u8),
    /// Full-precision FedAvg.
    Fp32,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Algorithm::FedMpq => f.write_str("fedmpq"),
            Algorithm::Aqfl => f.write_str("aqfl"),
            Algorithm::Fpq(k) => write!(f, "fpq-{k}"),
            Algorithm::Fp32 => f.write_str("fp32"),
        }
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "fedmpq" => Ok(Algorithm::FedMpq),
            "aqfl" => Ok(Algorithm::Aqfl),
            "fp32" => Ok(Algorithm::Fp32),
            other => {
                let bits = other
                    .strip_prefix("fpq")
                    .map(|rest| rest.trim_start_matches('-'))
                    .and_then(|k| k.parse::<u8>().ok())
                    .filter(|k| (1..=8).contains(k));
                bits.map(Algorithm::Fpq).ok_or_else(|| {
                    format!("unknown algorithm `{s}` (expected fedmpq, aqfl, fpq-<1..8> or fp32)")
                })
            }
        }
    }
}

impl TryFrom<String> for Algorithm {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Algorithm> for String {
    fn from(a: Algorithm) -> String {
        a.to_string()
    }
}

/// Independently switchable parts of the mixed-precision pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Group Lasso on the bit planes during local training.
    pub lasso: bool,
    /// Drop sparse most-significant planes after local training.
    pub msb_pruning: bool,
    /// Server-side pruning-growing bit reallocation.
    pub pruning_growing: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            lasso: true,
            msb_pruning: true,
            pruning_growing: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelConfig {
    Mlp {
        hidden: Vec<usize>,
    },
    /// Unpadded stride-1 convolutions followed by one dense layer.
    Conv {
        channels: Vec<usize>,
        kernel: usize,
    },
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Mlp { hidden: vec![64] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    Blobs(BlobsConfig),
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        classes: Option<usize>,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Blobs(BlobsConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub algorithm: Algorithm,
    /// Number of clients, `N`.
    pub clients: usize,
    /// Fraction of clients sampled each round.
    pub participation: f64,
    /// Global rounds, `T`.
    pub rounds: u64,
    /// Per-client average bit-width budgets, `v`.
    pub budgets: Vec<u8>,
    /// Dirichlet concentration, `α`.
    pub alpha: f64,
    pub seed: u64,
    pub execution: Execution,
    /// Directory of shard index files from `partition`; overrides the
    /// Dirichlet draw when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partition_dir: Option<PathBuf>,
    pub ablation: Ablation,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "fedmpq".into(),
            algorithm: Algorithm::FedMpq,
            clients: 10,
            participation: 0.5,
            rounds: 30,
            budgets: vec![2, 2, 4, 4, 4, 6, 6, 6, 8, 8],
            alpha: 0.5,
            seed: 0,
            execution: Execution::Parallel,
            partition_dir: None,
            ablation: Ablation::default(),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml_string()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.clients == 0 {
            return fail("clients must be >= 1".into());
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return fail(format!("participation must be in (0, 1], got {}", self.participation));
        }
        if self.budgets.len() != self.clients {
            return fail(format!(
                "budgets lists {} entries for {} clients",
                self.budgets.len(),
                self.clients
            ));
        }
        if let Some(b) = self.budgets.iter().find(|b| !(1..=8).contains(*b)) {
            return fail(format!("budget {b} outside [1, 8]"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be positive, got {}", self.alpha));
        }
        if i64::try_from(self.seed).is_err() {
            return fail(format!("seed {} does not fit a signed 64-bit integer", self.seed));
        }
        self.train.validate()?;
        match &self.model {
            ModelConfig::Mlp { hidden } if hidden.contains(&0) => fail("hidden widths must be >= 1".into()),
            ModelConfig::Conv { channels, kernel } if channels.is_empty() || channels.contains(&0) || *kernel == 0 => {
                fail("conv model needs non-empty channels and kernel >= 1".into())
            }
            _ => Ok(()),
        }
    }

    /// Training settings after applying the algorithm and ablation toggles.
    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        match self.algorithm {
            Algorithm::FedMpq => {
                if !self.ablation.lasso {
                    t.lambda = 0.0;
                }
                t.prune_msbs = self.ablation.msb_pruning;
            }
            Algorithm::Aqfl | Algorithm::Fpq(_) => {
                t.lambda = 0.0;
                t.prune_msbs = false;
            }
            Algorithm::Fp32 => {
                t.lambda = 0.0;
                t.prune_msbs = false;
                t.activation_bits = 0;
            }
        }
        t
    }

    /// Bit-width each client's model is quantized at before any adjustment.
    pub fn initial_bits(&self, client: usize) -> u8 {
        match self.algorithm {
            Algorithm::FedMpq | Algorithm::Aqfl => self.budgets[client],
            Algorithm::Fpq(k) => k,
            Algorithm::Fp32 => 32,
        }
    }

    /// Per-client weight in aggregation, multiplied by shard size: the bit
    /// budget each client actually trains under.
    pub fn aggregation_budget(&self, client: usize) -> f64 {
        f64::from(self.initial_bits(client))
    }
}
