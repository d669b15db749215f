//! Run configuration: a flat TOML document.
//!
//! ```toml
//! dataset = "blobs"
//! epochs = 30
//! eta = 0.05
//! blob_counts = [1000, 100, 10]
//! ```
//!
//! Every key is optional; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, ImbalanceMode, SplitSpec};
use crate::encoding::EncodingMode;
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Blobs,
    Mnist,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    CrossEntropy,
    Mse,
    Focal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub epsilon: f64,
    pub mu: f64,
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossName,
    /// Focal loss focusing parameter.
    pub gamma: f64,
    /// Focal loss per-class weights; empty means all ones.
    pub alpha: Vec<f64>,
    pub mode: EncodingMode,
    pub seed: u64,
    pub layer_sizes: Vec<usize>,
    pub batch_norm: bool,
    pub n_min: usize,

    pub dataset: DatasetKind,
    /// Seed for dataset generation and splitting, independent of `seed`.
    pub data_seed: u64,
    pub imbalance: ImbalanceMode,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub blob_counts: Vec<usize>,
    pub blob_dims: usize,
    pub blob_separation: f64,
    pub ablate_seeds: Vec<u64>,
}

impl Default for Config {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epsilon: t.epsilon,
            mu: t.mu,
            eta: t.eta,
            epochs: t.epochs,
            batch_size: t.batch_size,
            loss: LossName::CrossEntropy,
            gamma: 2.0,
            alpha: Vec::new(),
            mode: t.mode,
            seed: t.seed,
            layer_sizes: t.layer_sizes,
            batch_norm: t.batch_norm,
            n_min: 1,
            dataset: DatasetKind::Blobs,
            data_seed: 0,
            imbalance: ImbalanceMode::LongTailed,
            val_per_class: 5,
            test_per_class: 100,
            blob_counts: vec![1000, 100, 10],
            blob_dims: 2,
            blob_separation: 4.0,
            ablate_seeds: vec![0, 1, 2],
        }
    }
}

fn range(cond: bool, key: &str, bound: &str, value: impl std::fmt::Display) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(format!("{key} must be {bound}, got {value}")))
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        range(
            self.epsilon >= 0.0 && self.epsilon.is_finite(),
            "epsilon",
            ">= 0",
            self.epsilon,
        )?;
        range(self.mu > 0.0 && self.mu <= 1.0, "mu", "in (0, 1]", self.mu)?;
        range(
            self.eta > 0.0 && self.eta.is_finite(),
            "eta",
            "> 0",
            self.eta,
        )?;
        range(self.batch_size >= 2, "batch_size", ">= 2", self.batch_size)?;
        range(
            self.gamma >= 0.0 && self.gamma.is_finite(),
            "gamma",
            ">= 0",
            self.gamma,
        )?;
        range(
            self.layer_sizes.len() >= 2 && !self.layer_sizes.contains(&0),
            "layer_sizes",
            "at least two positive sizes",
            format!("{:?}", self.layer_sizes),
        )?;
        let n = self.num_classes();
        range(
            self.n_min >= 1 && self.n_min <= n,
            "n_min",
            &format!("in 1..={n}"),
            self.n_min,
        )?;
        range(
            self.val_per_class >= 1,
            "val_per_class",
            ">= 1",
            self.val_per_class,
        )?;
        if !self.alpha.is_empty() {
            range(
                self.alpha.len() == n,
                "alpha",
                &format!("empty or of length {n}"),
                self.alpha.len(),
            )?;
        }
        if self.dataset == DatasetKind::Blobs {
            range(
                self.blob_counts.len() == n,
                "blob_counts",
                &format!("of length {n} (the output size)"),
                self.blob_counts.len(),
            )?;
            range(
                !self.blob_counts.contains(&0),
                "blob_counts",
                "positive",
                format!("{:?}", self.blob_counts),
            )?;
            range(
                self.blob_dims == self.layer_sizes[0],
                "blob_dims",
                &format!("equal to the input size {}", self.layer_sizes[0]),
                self.blob_dims,
            )?;
            range(
                self.test_per_class >= 1,
                "test_per_class",
                ">= 1",
                self.test_per_class,
            )?;
            range(
                self.blob_separation.is_finite(),
                "blob_separation",
                "finite",
                self.blob_separation,
            )?;
        }
        self.train_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn num_classes(&self) -> usize {
        self.layer_sizes.last().copied().unwrap_or(0)
    }

    pub fn loss_kind(&self) -> LossKind {
        match self.loss {
            LossName::CrossEntropy => LossKind::CrossEntropy,
            LossName::Mse => LossKind::Mse,
            LossName::Focal => LossKind::Focal {
                gamma: self.gamma,
                alpha: (!self.alpha.is_empty()).then(|| self.alpha.clone()),
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            eta: self.eta,
            mu: self.mu,
            epsilon: self.epsilon,
            epochs: self.epochs,
            batch_size: self.batch_size,
            loss: self.loss_kind(),
            mode: self.mode,
            seed: self.seed,
            layer_sizes: self.layer_sizes.clone(),
            batch_norm: self.batch_norm,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            val_per_class: self.val_per_class,
            test_per_class: self.test_per_class,
            mode: self.imbalance,
            seed: self.data_seed,
        }
    }

    /// Builds `(train, val, test)`.
    ///
    /// Blobs are sampled from three independent seeds. MNIST is read from
    /// `data_dir`; the imbalance profile is applied to the official
    /// training file and the official test file is used as is.
    pub fn load_datasets(&self, data_dir: Option<&Path>) -> Result<(Dataset, Dataset, Dataset)> {
        match self.dataset {
            DatasetKind::Blobs => {
                let n = self.blob_counts.len();
                let s = self.data_seed.wrapping_mul(3);
                let gen = |seed: u64, counts: &[usize]| {
                    data::gen_blobs(seed, counts, self.blob_dims, self.blob_separation)
                };
                Ok((
                    gen(s, &self.blob_counts)?,
                    gen(s + 1, &vec![self.val_per_class; n])?,
                    gen(s + 2, &vec![self.test_per_class; n])?,
                ))
            }
            DatasetKind::Mnist => {
                let dir = data_dir.ok_or_else(|| {
                    Error::Config("dataset = \"mnist\" needs a data directory".into())
                })?;
                let (full, test) = data::load_mnist(dir)?;
                let (train, val) = data::apply_imbalance(&full, &self.split_spec())?;
                Ok((train, val, test))
            }
        }
    }
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<Config> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Config::from_toml(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Parse {
            path: path.to_path_buf(),
            message: msg,
        },
        other => other,
    })
}
