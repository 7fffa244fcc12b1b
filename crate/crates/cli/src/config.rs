//! Experiment configuration files (TOML).
//!
//! A minimal config names the algorithm, the population, the dataset, the
//! model, the aggregator and the attack; everything else has a default.
//!
//! ```toml
//! algorithm = "fedavg"
//! num_clients = 20
//! num_byzantine = 5
//! rounds = 100
//!
//! [dataset]
//! kind = "synthetic"
//!
//! [model]
//! kind = "logistic"
//!
//! [aggregator]
//! kind = "mean"
//!
//! [attack]
//! kind = "none"
//! ```
//!
//! Defaults: `batch_size = 32`, `local_steps = 50` (FedAvg only), `seed = 0`,
//! the algorithm's learning-rate schedule and evaluation interval (10 for
//! FedSGD, 1 for FedAvg), IID partitioning and `output_path = "results"`.
//!
//! A `[sweep]` section with `aggregators` and/or `attacks` arrays runs the
//! cross product; a missing list falls back to the top-level entry.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use fedrobust::aggregators::Linkage;
use fedrobust::{AggregatorSpec, Algorithm, AttackSpec, FederationConfig, PartitionScheme, Schedule};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Syntax(String),
    #[error("missing required key `{key}`")]
    MissingKey { key: String },
    #[error("unknown key `{key}`")]
    UnknownKey { key: String },
    #[error("invalid value for `{key}`: {detail}")]
    InvalidEnum { key: String, detail: String },
    #[error("bad value for `{key}`: {detail}")]
    Invalid { key: String, detail: String },
    #[error(
        "`num_byzantine` = {m} with `num_clients` = {k} is rejected: M must be below K/2 because the majority \
         of the clients are benign"
    )]
    ByzantineMajority { m: usize, k: usize },
    #[error("cannot serialize config: {0}")]
    Serialize(String),
}

fn bad(key: &str, detail: impl ToString) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        detail: detail.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// The four standard IDX files in `dir`; a relative `dir` is taken
    /// from the config file's directory.
    Mnist {
        dir: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
    },
    /// Gaussian blobs, one per class.
    Synthetic {
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_train_per_class")]
        train_per_class: usize,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
        #[serde(default = "default_separation")]
        separation: f64,
    },
}

fn default_classes() -> usize {
    4
}
fn default_dim() -> usize {
    8
}
fn default_train_per_class() -> usize {
    250
}
fn default_test_per_class() -> usize {
    50
}
fn default_separation() -> f64 {
    3.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Mlp { hidden: usize },
    Logistic {},
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aggregators: Vec<AggregatorSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attacks: Vec<AttackSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub num_clients: usize,
    pub num_byzantine: usize,
    pub rounds: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_steps: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_interval: Option<usize>,
    #[serde(default = "default_output_path")]
    pub output_path: PathBuf,
    /// Rounds (0-based) at which benign pairwise similarity is recorded.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub similarity_rounds: Vec<usize>,
    pub dataset: DatasetSpec,
    #[serde(default = "default_partition")]
    pub partition: PartitionScheme,
    pub model: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Schedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregator: Option<AggregatorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Sweep>,
}

fn default_batch_size() -> usize {
    32
}
fn default_output_path() -> PathBuf {
    PathBuf::from("results")
}
fn default_partition() -> PartitionScheme {
    PartitionScheme::Iid {}
}

pub const DEFAULT_LOCAL_STEPS: usize = 50;

/// One (aggregator, attack) pair of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub name: String,
    pub aggregator: AggregatorSpec,
    pub attack: AttackSpec,
}

/// File-name fragment for an aggregator, including any parameter that
/// distinguishes it from the defaults.
pub fn aggregator_label(spec: &AggregatorSpec) -> String {
    match spec {
        AggregatorSpec::Krum {
            num_byzantine: Some(m),
        } => format!("krum_m{m}"),
        AggregatorSpec::AutoGm { lambda } => format!("autogm_l{lambda}"),
        AggregatorSpec::TrimmedMean {
            trim_fraction: Some(beta),
        } => format!("trimmed_mean_b{beta}"),
        AggregatorSpec::CenteredClipping { tau, iters } => format!("centered_clipping_t{tau}_i{iters}"),
        AggregatorSpec::Clustering {
            linkage: Linkage::Complete,
        }
        | AggregatorSpec::ClippedClustering {
            linkage: Linkage::Complete,
        } => format!("{}_complete", spec.name()),
        other => other.name().to_string(),
    }
}

pub fn cell_name(aggregator: &AggregatorSpec, attack: &AttackSpec) -> String {
    format!("{}__{}", aggregator_label(aggregator), attack.label())
}

/// Parses and validates a config.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Syntax(e.message().to_string()))?;
    let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(classify)?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

/// Turns a serde error into a message that names the offending key.
fn classify(err: serde_path_to_error::Error<toml::de::Error>) -> ConfigError {
    let path = err.path().to_string();
    let message = err.inner().message().to_string();
    let join = |leaf: &str| {
        if path == leaf || path.ends_with(&format!(".{leaf}")) {
            path.clone()
        } else if path == "." || path.is_empty() {
            leaf.to_string()
        } else {
            format!("{path}.{leaf}")
        }
    };
    let quoted = |m: &str| m.split('`').nth(1).map(str::to_string);
    if let Some(rest) = message.strip_prefix("missing field") {
        let key = quoted(rest).unwrap_or_default();
        ConfigError::MissingKey { key: join(&key) }
    } else if let Some(rest) = message.strip_prefix("unknown field") {
        let key = quoted(rest).unwrap_or_default();
        ConfigError::UnknownKey { key: join(&key) }
    } else if message.starts_with("unknown variant") {
        ConfigError::InvalidEnum { key: path, detail: message }
    } else {
        ConfigError::Invalid { key: path, detail: message }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_clients == 0 {
            return Err(bad("num_clients", "need at least one client"));
        }
        if 2 * self.num_byzantine >= self.num_clients {
            return Err(ConfigError::ByzantineMajority {
                m: self.num_byzantine,
                k: self.num_clients,
            });
        }
        self.federation()
            .validate()
            .map_err(|e| bad(core_key(&e).unwrap_or("federation"), e))?;
        self.partition.validate().map_err(|e| bad("partition", e))?;
        match self.model {
            ModelSpec::Mlp { hidden: 0 } => return Err(bad("model.hidden", "must be at least 1")),
            ModelSpec::Mlp { .. } | ModelSpec::Logistic {} => {}
        }
        match &self.dataset {
            DatasetSpec::Synthetic {
                classes,
                dim,
                train_per_class,
                test_per_class,
                separation,
            } => {
                if *classes < 2 {
                    return Err(bad("dataset.classes", "need at least two classes"));
                }
                if *dim == 0 || *train_per_class == 0 || *test_per_class == 0 {
                    return Err(bad("dataset", "dim and sample counts must be positive"));
                }
                if !separation.is_finite() {
                    return Err(bad("dataset.separation", "must be finite"));
                }
            }
            DatasetSpec::Mnist {
                train_limit, test_limit, ..
            } => {
                if *train_limit == Some(0) || *test_limit == Some(0) {
                    return Err(bad("dataset", "limits must be positive"));
                }
            }
        }
        let cells = self.cells()?;
        let mut names = BTreeSet::new();
        for cell in &cells {
            cell.aggregator
                .resolve(self.num_clients, self.num_byzantine)
                .map_err(|e| bad("aggregator", e))?;
            cell.attack.validate().map_err(|e| bad("attack", e))?;
            if !names.insert(cell.name.clone()) {
                return Err(bad("sweep", format!("two cells share the name {}", cell.name)));
            }
        }
        Ok(())
    }

    /// Checks that the files the config points at exist, relative to `base`.
    pub fn check_files(&self, base: &Path) -> Result<(), ConfigError> {
        if let DatasetSpec::Mnist { dir, .. } = &self.dataset {
            let dir = base.join(dir);
            for name in fedrobust::data::MNIST_FILES {
                if !dir.join(name).is_file() {
                    return Err(bad("dataset.dir", format!("{} does not exist", dir.join(name).display())));
                }
            }
        }
        Ok(())
    }

    pub fn federation(&self) -> FederationConfig {
        let mut c = FederationConfig::new(self.algorithm, self.num_clients, self.num_byzantine, self.rounds);
        c.local_steps = match self.algorithm {
            Algorithm::FedSgd => 1,
            Algorithm::FedAvg => self.local_steps.unwrap_or(DEFAULT_LOCAL_STEPS),
        };
        c.batch_size = self.batch_size;
        c.seed = self.seed;
        c.schedule = self.schedule.clone().unwrap_or_else(|| self.algorithm.default_schedule());
        c.eval_interval = self.eval_interval.unwrap_or_else(|| self.algorithm.default_eval_interval());
        c.similarity_rounds = self.similarity_rounds.clone();
        c
    }

    /// The (aggregator, attack) grid, in sweep order.
    pub fn cells(&self) -> Result<Vec<Cell>, ConfigError> {
        let sweep = self.sweep.clone().unwrap_or_default();
        let aggregators = if sweep.aggregators.is_empty() {
            vec![self.aggregator.clone().ok_or(ConfigError::MissingKey {
                key: "aggregator".into(),
            })?]
        } else {
            sweep.aggregators
        };
        let attacks = if sweep.attacks.is_empty() {
            vec![self.attack.clone().ok_or(ConfigError::MissingKey { key: "attack".into() })?]
        } else {
            sweep.attacks
        };
        Ok(aggregators
            .iter()
            .flat_map(|a| {
                attacks.iter().map(move |b| Cell {
                    name: cell_name(a, b),
                    aggregator: a.clone(),
                    attack: b.clone(),
                })
            })
            .collect())
    }

    /// This config narrowed to one cell, as recorded in result headers.
    pub fn for_cell(&self, cell: &Cell) -> Self {
        Self {
            aggregator: Some(cell.aggregator.clone()),
            attack: Some(cell.attack.clone()),
            sweep: None,
            ..self.clone()
        }
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| ConfigError::Serialize(e.to_string()))
    }
}

fn core_key(err: &fedrobust::Error) -> Option<&'static str> {
    match err {
        fedrobust::Error::InvalidParameter { name, .. } => Some(name),
        _ => None,
    }
}
