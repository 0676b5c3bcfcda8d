//! Flat `key = value` run configuration.
//!
//! Resolution order is built-in defaults, then the config file, then each
//! `--set` override in command-line order. A config file is either flat text
//! (one pair per line, `#` starts a comment) or a run manifest written by
//! `train`, whose `config` table holds the same pairs.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dpfl_core::{FederationConfig, OptimizerConfig};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{key}` ({origin})")]
    UnknownKey { key: String, origin: String },
    #[error("config key `{key}`: cannot parse `{value}` as {expected}")]
    InvalidValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("config key `{key}` out of range: {reason}")]
    OutOfRange { key: String, reason: String },
    #[error("conflicting settings: {0}")]
    Conflict(String),
    #[error("{origin}, line {line}: expected `key = value`, found `{text}`")]
    Syntax {
        origin: String,
        line: usize,
        text: String,
    },
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionKind {
    Dirichlet,
    Iid,
}

/// Everything that determines a run's outputs besides the dataset bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub federation: FederationConfig,
    pub hidden: Vec<usize>,
    pub partition: PartitionKind,
    pub dir_alpha: f64,
    /// Dataset files; both unset means synthetic blobs.
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub classes: usize,
    pub dim: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub separation: f64,
    pub data_seed: u64,
    pub probe_radii: Vec<f64>,
    pub probe_directions: usize,
    pub slice_extent: f64,
    pub slice_resolution: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            federation: FederationConfig::default(),
            hidden: vec![32],
            partition: PartitionKind::Dirichlet,
            dir_alpha: 0.6,
            train_data: None,
            test_data: None,
            classes: 10,
            dim: 20,
            train_size: 20_000,
            test_size: 5_000,
            separation: 6.0,
            data_seed: 0,
            probe_radii: vec![0.0, 0.05, 0.1, 0.2, 0.5, 1.0],
            probe_directions: 16,
            slice_extent: 1.0,
            slice_resolution: 21,
        }
    }
}

pub const KEYS: &[&str] = &[
    "clients",
    "q",
    "rounds",
    "local_epochs",
    "batch_size",
    "method",
    "sparsity",
    "clip",
    "sigma",
    "delta",
    "lr",
    "lr_decay",
    "momentum",
    "rho",
    "seed",
    "hidden",
    "partition",
    "dir_alpha",
    "train_data",
    "test_data",
    "classes",
    "dim",
    "train_size",
    "test_size",
    "separation",
    "data_seed",
    "probe_radii",
    "probe_directions",
    "slice_extent",
    "slice_resolution",
];

fn parse<T: FromStr>(key: &str, value: &str, expected: &'static str) -> Result<T> {
    value.parse().map_err(|_| ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        expected,
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str, expected: &'static str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|v| parse(key, v.trim(), expected))
        .collect()
}

fn join<T: Display>(values: &[T]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn out_of_range(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::OutOfRange {
        key: key.to_string(),
        reason: reason.into(),
    }
}

impl RunConfig {
    /// Applies one pair. `origin` names where it came from, for messages.
    pub fn set(&mut self, key: &str, value: &str, origin: &str) -> Result<()> {
        let value = value.trim();
        let f = &mut self.federation;
        let opt: &mut OptimizerConfig = &mut f.optimizer;
        match key {
            "clients" => f.clients = parse(key, value, "an integer")?,
            "q" => f.sample_ratio = parse(key, value, "a number")?,
            "rounds" => f.rounds = parse(key, value, "an integer")?,
            "local_epochs" => f.local_epochs = parse(key, value, "an integer")?,
            "batch_size" => f.batch_size = parse(key, value, "an integer")?,
            "method" => {
                f.method = value.parse().map_err(|_| ConfigError::InvalidValue {
                    key: key.to_string(),
                    value: value.to_string(),
                    expected:
                        "one of dp-fedavg, dp-fedsam, dp-fedsam-topk, fed-smp-topk, fed-smp-randk",
                })?
            }
            "sparsity" => f.sparsity = parse(key, value, "a number")?,
            "clip" => f.clip = parse(key, value, "a number")?,
            "sigma" => f.noise_multiplier = parse(key, value, "a number")?,
            "delta" => f.delta = parse(key, value, "a number")?,
            "lr" => opt.lr = parse(key, value, "a number")?,
            "lr_decay" => opt.lr_decay = parse(key, value, "a number")?,
            "momentum" => opt.momentum = parse(key, value, "a number")?,
            "rho" => opt.rho = parse(key, value, "a number")?,
            "seed" => f.seed = parse(key, value, "an unsigned integer")?,
            "hidden" => {
                self.hidden = if value.is_empty() {
                    Vec::new()
                } else {
                    parse_list(key, value, "comma-separated integers")?
                }
            }
            "partition" => {
                self.partition = match value {
                    "dirichlet" => PartitionKind::Dirichlet,
                    "iid" => PartitionKind::Iid,
                    _ => {
                        return Err(ConfigError::InvalidValue {
                            key: key.to_string(),
                            value: value.to_string(),
                            expected: "dirichlet or iid",
                        })
                    }
                }
            }
            "dir_alpha" => self.dir_alpha = parse(key, value, "a number")?,
            "train_data" => self.train_data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "test_data" => self.test_data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "classes" => self.classes = parse(key, value, "an integer")?,
            "dim" => self.dim = parse(key, value, "an integer")?,
            "train_size" => self.train_size = parse(key, value, "an integer")?,
            "test_size" => self.test_size = parse(key, value, "an integer")?,
            "separation" => self.separation = parse(key, value, "a number")?,
            "data_seed" => self.data_seed = parse(key, value, "an unsigned integer")?,
            "probe_radii" => self.probe_radii = parse_list(key, value, "comma-separated numbers")?,
            "probe_directions" => self.probe_directions = parse(key, value, "an integer")?,
            "slice_extent" => self.slice_extent = parse(key, value, "a number")?,
            "slice_resolution" => self.slice_resolution = parse(key, value, "an integer")?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                    origin: origin.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Every key with its current value, in `KEYS` order. Feeding these back
    /// through `set` reproduces the config exactly.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let f = &self.federation;
        let o = &f.optimizer;
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let value = |key: &str| -> String {
            match key {
                "clients" => f.clients.to_string(),
                "q" => f.sample_ratio.to_string(),
                "rounds" => f.rounds.to_string(),
                "local_epochs" => f.local_epochs.to_string(),
                "batch_size" => f.batch_size.to_string(),
                "method" => f.method.to_string(),
                "sparsity" => f.sparsity.to_string(),
                "clip" => f.clip.to_string(),
                "sigma" => f.noise_multiplier.to_string(),
                "delta" => f.delta.to_string(),
                "lr" => o.lr.to_string(),
                "lr_decay" => o.lr_decay.to_string(),
                "momentum" => o.momentum.to_string(),
                "rho" => o.rho.to_string(),
                "seed" => f.seed.to_string(),
                "hidden" => join(&self.hidden),
                "partition" => match self.partition {
                    PartitionKind::Dirichlet => "dirichlet".to_string(),
                    PartitionKind::Iid => "iid".to_string(),
                },
                "dir_alpha" => self.dir_alpha.to_string(),
                "train_data" => path(&self.train_data),
                "test_data" => path(&self.test_data),
                "classes" => self.classes.to_string(),
                "dim" => self.dim.to_string(),
                "train_size" => self.train_size.to_string(),
                "test_size" => self.test_size.to_string(),
                "separation" => self.separation.to_string(),
                "data_seed" => self.data_seed.to_string(),
                "probe_radii" => join(&self.probe_radii),
                "probe_directions" => self.probe_directions.to_string(),
                "slice_extent" => self.slice_extent.to_string(),
                "slice_resolution" => self.slice_resolution.to_string(),
                _ => unreachable!("every key in KEYS has a value"),
            }
        };
        KEYS.iter().map(|&k| (k, value(k))).collect()
    }

    pub fn to_json(&self) -> Value {
        Value::Object(
            self.entries()
                .into_iter()
                .map(|(k, v)| (k.to_string(), Value::String(v)))
                .collect::<Map<_, _>>(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.federation;
        let o = &f.optimizer;
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(out_of_range(
                    key,
                    format!("must be finite and > 0, got {v}"),
                ))
            }
        };
        let non_negative = |key: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(out_of_range(
                    key,
                    format!("must be finite and >= 0, got {v}"),
                ))
            }
        };
        let at_least = |key: &str, v: usize, min: usize| {
            if v >= min {
                Ok(())
            } else {
                Err(out_of_range(key, format!("must be >= {min}, got {v}")))
            }
        };

        at_least("clients", f.clients, 1)?;
        if !(f.sample_ratio > 0.0 && f.sample_ratio <= 1.0) {
            return Err(out_of_range(
                "q",
                format!("must lie in (0, 1], got {}", f.sample_ratio),
            ));
        }
        if (f.sample_ratio * f.clients as f64).round() < 1.0 {
            return Err(out_of_range(
                "q",
                format!(
                    "q * clients = {} rounds to zero sampled clients",
                    f.sample_ratio * f.clients as f64
                ),
            ));
        }
        at_least("rounds", f.rounds, 1)?;
        at_least("local_epochs", f.local_epochs, 1)?;
        at_least("batch_size", f.batch_size, 1)?;
        if !(f.sparsity > 0.0 && f.sparsity <= 1.0) {
            return Err(out_of_range(
                "sparsity",
                format!("must lie in (0, 1], got {}", f.sparsity),
            ));
        }
        positive("clip", f.clip)?;
        non_negative("sigma", f.noise_multiplier)?;
        if !(f.delta > 0.0 && f.delta < 1.0) {
            return Err(out_of_range(
                "delta",
                format!("must lie in (0, 1), got {}", f.delta),
            ));
        }
        non_negative("lr", o.lr)?;
        non_negative("lr_decay", o.lr_decay)?;
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(out_of_range(
                "momentum",
                format!("must lie in [0, 1), got {}", o.momentum),
            ));
        }
        non_negative("rho", o.rho)?;
        if self.hidden.contains(&0) {
            return Err(out_of_range("hidden", "layer widths must be >= 1"));
        }
        positive("dir_alpha", self.dir_alpha)?;
        at_least("classes", self.classes, 2)?;
        at_least("dim", self.dim, 1)?;
        at_least("train_size", self.train_size, self.classes)?;
        at_least("test_size", self.test_size, 1)?;
        non_negative("separation", self.separation)?;
        if self.probe_radii.iter().any(|r| !r.is_finite()) || !self.probe_radii.contains(&0.0) {
            return Err(out_of_range("probe_radii", "must be finite and include 0"));
        }
        at_least("probe_directions", self.probe_directions, 1)?;
        positive("slice_extent", self.slice_extent)?;
        at_least("slice_resolution", self.slice_resolution, 2)?;

        if f.method.sparsifier().is_none() && f.sparsity != 1.0 {
            return Err(ConfigError::Conflict(format!(
                "method {} does not sparsify, so sparsity must be 1 (got {})",
                f.method, f.sparsity
            )));
        }
        if self.train_data.is_some() != self.test_data.is_some() {
            return Err(ConfigError::Conflict(
                "train_data and test_data must be given together".to_string(),
            ));
        }
        f.validate().map_err(|e| match e {
            dpfl_core::Error::InvalidParameter { name, reason } => out_of_range(name, reason),
            other => out_of_range("config", other.to_string()),
        })
    }

    /// Applies flat `key = value` text.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    origin: origin.to_string(),
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            self.set(key.trim(), value, origin)?;
        }
        Ok(())
    }

    /// Applies the `config` table of a run manifest.
    pub fn apply_manifest(&mut self, manifest: &Value, path: &Path) -> Result<()> {
        let table = manifest
            .get("config")
            .and_then(Value::as_object)
            .ok_or_else(|| ConfigError::Manifest {
                path: path.to_path_buf(),
                reason: "missing `config` table".to_string(),
            })?;
        let origin = path.display().to_string();
        for (key, value) in table {
            let value = value.as_str().ok_or_else(|| ConfigError::Manifest {
                path: path.to_path_buf(),
                reason: format!("value of `{key}` is not a string"),
            })?;
            self.set(key, value, &origin)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        if text.trim_start().starts_with('{') {
            let manifest: Value =
                serde_json::from_str(&text).map_err(|e| ConfigError::Manifest {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })?;
            self.apply_manifest(&manifest, path)
        } else {
            self.apply_text(&text, &path.display().to_string())
        }
    }
}

/// Defaults, then `file`, then each `key=value` override; validated.
pub fn parse_config(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(path) = file {
        config.apply_file(path)?;
    }
    for pair in overrides {
        let (key, value) = pair.split_once('=').ok_or_else(|| ConfigError::Syntax {
            origin: "--set".to_string(),
            line: 1,
            text: pair.clone(),
        })?;
        config.set(key.trim(), value, "--set")?;
    }
    config.validate()?;
    Ok(config)
}
