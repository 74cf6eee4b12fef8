//! Run configuration: one TOML document holding the architecture, the
//! hyperparameters, the data source and the output directory. Unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::model::{ArchitectureConfig, Network};
use crate::train::Hyperparams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Mnist,
    Cifar10,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    /// MNIST: image and label IDX files of each split.
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// CIFAR-10: binary batch files.
    #[serde(default)]
    pub train_batches: Vec<PathBuf>,
    pub test_batch: Option<PathBuf>,
    /// Keep only the first examples of each split.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// Normalize per channel with training-split statistics.
    #[serde(default)]
    pub normalize: bool,
    /// Synthetic task: sizes, noise half-width and generator seed.
    pub synthetic_train: Option<usize>,
    pub synthetic_test: Option<usize>,
    pub synthetic_noise: Option<f64>,
    pub synthetic_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub architecture: ArchitectureConfig,
    pub hyperparams: Hyperparams,
    pub data: DataConfig,
    /// Output directory for metrics and checkpoints.
    pub out_dir: Option<PathBuf>,
}

fn missing(field: &str) -> Error {
    Error::config(field, "required for this data kind")
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .map_or_else(|| "config".to_string(), str::to_string);
            Error::config(field, e.message().trim().to_string())
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Reads a configuration file. Relative data paths and the output
    /// directory are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut cfg.data;
        for p in [
            &mut d.train_images,
            &mut d.train_labels,
            &mut d.test_images,
            &mut d.test_labels,
            &mut d.test_batch,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        d.train_batches.iter_mut().for_each(fix);
        if let Some(p) = cfg.out_dir.as_mut() {
            fix(p);
        }
        Ok(cfg)
    }

    /// Validates the configuration as a whole and returns the network.
    pub fn validate(&self) -> Result<Network> {
        let net = Network::new(self.architecture.clone())?;
        self.hyperparams.validate(&net)?;
        let d = &self.data;
        match d.kind {
            DataKind::Mnist => {
                for (v, f) in [
                    (&d.train_images, "data.train_images"),
                    (&d.train_labels, "data.train_labels"),
                    (&d.test_images, "data.test_images"),
                    (&d.test_labels, "data.test_labels"),
                ] {
                    if v.is_none() {
                        return Err(missing(f));
                    }
                }
                if self.architecture.input != [1, 28, 28] || self.architecture.classes != 10 {
                    return Err(Error::config(
                        "architecture.input",
                        "MNIST needs input [1, 28, 28] and 10 classes",
                    ));
                }
            }
            DataKind::Cifar10 => {
                if d.train_batches.is_empty() {
                    return Err(missing("data.train_batches"));
                }
                if d.test_batch.is_none() {
                    return Err(missing("data.test_batch"));
                }
                if self.architecture.input != [3, 32, 32] || self.architecture.classes != 10 {
                    return Err(Error::config(
                        "architecture.input",
                        "CIFAR-10 needs input [3, 32, 32] and 10 classes",
                    ));
                }
            }
            DataKind::Synthetic => {
                if d.synthetic_train.is_none() {
                    return Err(missing("data.synthetic_train"));
                }
                if d.synthetic_test.is_none() {
                    return Err(missing("data.synthetic_test"));
                }
            }
        }
        Ok(net)
    }

    /// Loads both splits; normalization statistics come from the training
    /// split.
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.data;
        let req = |p: &Option<PathBuf>, f: &str| p.clone().ok_or_else(|| missing(f));
        let (mut train, mut test) = match d.kind {
            DataKind::Mnist => (
                data::load_mnist_idx(
                    &req(&d.train_images, "data.train_images")?,
                    &req(&d.train_labels, "data.train_labels")?,
                )?,
                data::load_mnist_idx(
                    &req(&d.test_images, "data.test_images")?,
                    &req(&d.test_labels, "data.test_labels")?,
                )?,
            ),
            DataKind::Cifar10 => {
                let mut bytes = Vec::new();
                for p in &d.train_batches {
                    bytes.extend(std::fs::read(p).map_err(|e| Error::io(p, e))?);
                }
                (
                    data::parse_cifar10(&bytes)?,
                    data::load_cifar10_bin(&req(&d.test_batch, "data.test_batch")?)?,
                )
            }
            DataKind::Synthetic => {
                let seed = d.synthetic_seed.unwrap_or(0);
                let noise = d.synthetic_noise.unwrap_or(0.1);
                let shape = self.architecture.input;
                let classes = self.architecture.classes;
                let n_train = d
                    .synthetic_train
                    .ok_or_else(|| missing("data.synthetic_train"))?;
                let n_test = d
                    .synthetic_test
                    .ok_or_else(|| missing("data.synthetic_test"))?;
                let all = data::synthetic(n_train + n_test, shape, classes, noise, seed);
                let train_idx: Vec<usize> = (0..n_train).collect();
                let test_idx: Vec<usize> = (n_train..n_train + n_test).collect();
                (all.subset(&train_idx), all.subset(&test_idx))
            }
        };
        if let Some(n) = d.train_limit {
            train = train.take(n);
        }
        if let Some(n) = d.test_limit {
            test = test.take(n);
        }
        if d.normalize {
            let stats = train.stats();
            train = train.normalized(&stats)?;
            test = test.normalized(&stats)?;
        }
        Ok((train, test))
    }
}
