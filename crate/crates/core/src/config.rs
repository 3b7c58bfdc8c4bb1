//! Experiment configuration files (TOML).
//!
//! ```toml
//! seeds = [0, 1, 2, 3, 4]
//! output = "results/gaa.csv"
//!
//! [dataset]
//! kind = "synthetic"
//! classes = 3
//! dims = 10
//!
//! [partition]
//! kind = "dirichlet"
//! num_clients = 10
//!
//! [training]
//! aggregation = "gaa"
//! ```
//!
//! Omitted keys take their defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fedsim::{BetaMode, PartitionKind, PartitionSpec, RoundConfig, SimulationOptions};
use crate::gauss_agg::AggregationMethod;
use crate::metrics::DEFAULT_ECE_BINS;

/// Environment variable overriding the `processes` key.
pub const PROCESSES_ENV: &str = "FEDVB_PROCESSES";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub training: TrainingConfig,
    #[serde(default = "defaults::eval_mc_samples")]
    pub eval_mc_samples: usize,
    #[serde(default = "defaults::one")]
    pub eval_stride: usize,
    #[serde(default = "defaults::ece_bins")]
    pub ece_bins: usize,
    /// Also write the final-round reliability bins per seed.
    #[serde(default)]
    pub write_bins: bool,
    #[serde(default = "defaults::seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "defaults::output")]
    pub output: PathBuf,
    #[serde(default = "defaults::one")]
    pub processes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        #[serde(default = "defaults::classes")]
        classes: usize,
        #[serde(default = "defaults::dims")]
        dims: usize,
        #[serde(default = "defaults::samples_per_class")]
        samples_per_class: usize,
        #[serde(default = "defaults::test_samples_per_class")]
        test_samples_per_class: usize,
        #[serde(default = "defaults::spread")]
        spread: f64,
        /// Seed of the generated data, independent of the run seeds.
        #[serde(default)]
        data_seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    #[serde(default = "defaults::partition_kind")]
    pub kind: PartitionKind,
    #[serde(default = "defaults::concentration")]
    pub concentration: f64,
    #[serde(default = "defaults::num_clients")]
    pub num_clients: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            kind: defaults::partition_kind(),
            concentration: defaults::concentration(),
            num_clients: defaults::num_clients(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "defaults::hidden")]
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: defaults::hidden(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    /// One of `eaa|gaa|aalv|ppa|cf|point`.
    pub aggregation: String,
    /// PPA population size; required when `aggregation = "ppa"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub population: Option<usize>,
    #[serde(default = "defaults::beta_mode")]
    pub beta_mode: BetaMode,
    #[serde(default = "defaults::fraction")]
    pub fraction: f64,
    #[serde(default = "defaults::rounds")]
    pub rounds: usize,
    #[serde(default = "defaults::local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
}

mod defaults {
    use std::path::PathBuf;

    use crate::fedsim::{BetaMode, PartitionKind};

    pub fn one() -> usize {
        1
    }
    pub fn eval_mc_samples() -> usize {
        10
    }
    pub fn ece_bins() -> usize {
        crate::metrics::DEFAULT_ECE_BINS
    }
    pub fn seeds() -> Vec<u64> {
        vec![0]
    }
    pub fn output() -> PathBuf {
        PathBuf::from("results.csv")
    }
    pub fn classes() -> usize {
        10
    }
    pub fn dims() -> usize {
        20
    }
    pub fn samples_per_class() -> usize {
        200
    }
    pub fn test_samples_per_class() -> usize {
        100
    }
    pub fn spread() -> f64 {
        1.0
    }
    pub fn partition_kind() -> PartitionKind {
        PartitionKind::Iid
    }
    pub fn concentration() -> f64 {
        crate::fedsim::DEFAULT_CONCENTRATION
    }
    pub fn num_clients() -> usize {
        10
    }
    pub fn hidden() -> Vec<usize> {
        vec![400, 120, 84]
    }
    pub fn beta_mode() -> BetaMode {
        BetaMode::Uniform
    }
    pub fn fraction() -> f64 {
        1.0
    }
    pub fn rounds() -> usize {
        50
    }
    pub fn local_epochs() -> usize {
        10
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn lr() -> f64 {
        0.01
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn weight_decay() -> f64 {
        1e-5
    }
}

/// Parses and validates a config from TOML text.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg = deserialize(text)?;
    cfg.validate()?;
    Ok(cfg)
}

fn deserialize(text: &str) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::parse(text)
        .map_err(|e| Error::config("<document>", e.to_string().trim()))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        Error::config(key, e.into_inner().to_string().trim())
    })
}

/// Reads, parses and validates a config file; relative dataset paths are
/// resolved against the file's directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = deserialize(&text)?;
    if let (
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        },
        Some(base),
    ) = (&mut cfg.dataset, path.parent())
    {
        for p in [train_images, train_labels, test_images, test_labels] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Worker-pool size from the environment, if set.
pub fn env_processes() -> Result<Option<usize>> {
    match std::env::var(PROCESSES_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .ok()
            .filter(|&p: &usize| p > 0)
            .map(Some)
            .ok_or_else(|| {
                Error::config(
                    PROCESSES_ENV,
                    format!("expected a positive integer, got `{v}`"),
                )
            }),
        Err(_) => Ok(None),
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: usize| {
            if v == 0 {
                Err(Error::config(key, "must be positive"))
            } else {
                Ok(())
            }
        };
        match &self.dataset {
            DatasetConfig::Synthetic {
                classes,
                dims,
                samples_per_class,
                test_samples_per_class,
                spread,
                ..
            } => {
                if *classes < 2 {
                    return Err(Error::config("dataset.classes", "need at least 2 classes"));
                }
                if dims < classes {
                    return Err(Error::config(
                        "dataset.dims",
                        "must be at least the number of classes",
                    ));
                }
                positive("dataset.samples_per_class", *samples_per_class)?;
                positive("dataset.test_samples_per_class", *test_samples_per_class)?;
                if !(*spread >= 0.0 && spread.is_finite()) {
                    return Err(Error::config(
                        "dataset.spread",
                        "must be a non-negative number",
                    ));
                }
                if classes * samples_per_class < self.partition.num_clients {
                    return Err(Error::config(
                        "partition.num_clients",
                        "exceeds the number of training samples",
                    ));
                }
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                for (key, p) in [
                    ("dataset.train_images", train_images),
                    ("dataset.train_labels", train_labels),
                    ("dataset.test_images", test_images),
                    ("dataset.test_labels", test_labels),
                ] {
                    if !p.is_file() {
                        return Err(Error::config(
                            key,
                            format!("file {} does not exist", p.display()),
                        ));
                    }
                }
            }
        }
        positive("partition.num_clients", self.partition.num_clients)?;
        if !(self.partition.concentration > 0.0 && self.partition.concentration.is_finite()) {
            return Err(Error::config("partition.concentration", "must be positive"));
        }
        if let Some(i) = self.model.hidden.iter().position(|&h| h == 0) {
            return Err(Error::config(
                format!("model.hidden[{i}]"),
                "hidden widths must be positive",
            ));
        }
        let t = &self.training;
        let method = AggregationMethod::from_tag(&t.aggregation, t.population).map_err(|e| {
            let key = if t.aggregation == "ppa" {
                "training.population"
            } else {
                "training.aggregation"
            };
            Error::config(key, e.to_string())
        })?;
        if !(t.fraction > 0.0 && t.fraction <= 1.0) {
            return Err(Error::config(
                "training.fraction",
                format!("{} is outside (0, 1]", t.fraction),
            ));
        }
        positive("training.rounds", t.rounds)?;
        positive("training.local_epochs", t.local_epochs)?;
        positive("training.batch_size", t.batch_size)?;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::config("training.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::config("training.momentum", "must be in [0, 1)"));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return Err(Error::config(
                "training.weight_decay",
                "must be non-negative",
            ));
        }
        if let AggregationMethod::Ppa { population } = method {
            let k = self.round_config(0).active_count();
            if population < k {
                return Err(Error::config(
                    "training.population",
                    format!("must be at least the {k} active clients"),
                ));
            }
        }
        positive("eval_mc_samples", self.eval_mc_samples)?;
        positive("eval_stride", self.eval_stride)?;
        positive("ece_bins", self.ece_bins)?;
        positive("processes", self.processes)?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        Ok(())
    }

    pub fn aggregation_method(&self) -> AggregationMethod {
        AggregationMethod::from_tag(&self.training.aggregation, self.training.population)
            .expect("validated config")
    }

    pub fn round_config(&self, seed: u64) -> RoundConfig {
        let t = &self.training;
        RoundConfig {
            total_clients: self.partition.num_clients,
            fraction: t.fraction,
            rounds: t.rounds,
            local_epochs: t.local_epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            aggregation: AggregationMethod::from_tag(&t.aggregation, t.population)
                .unwrap_or(AggregationMethod::Point),
            beta_mode: t.beta_mode,
            seed,
        }
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            kind: self.partition.kind,
            concentration: self.partition.concentration,
            num_clients: self.partition.num_clients,
        }
    }

    pub fn simulation_options(&self) -> SimulationOptions {
        SimulationOptions {
            hidden: self.model.hidden.clone(),
            eval_mc_samples: self.eval_mc_samples,
            eval_stride: self.eval_stride,
            ece_bins: self.ece_bins,
            processes: self.processes,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// SHA-256 of the serialized config, hex encoded. `output` and
    /// `processes` are excluded since they do not affect results.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output = PathBuf::new();
        canonical.processes = 1;
        Sha256::digest(canonical.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::Synthetic {
                classes: defaults::classes(),
                dims: defaults::dims(),
                samples_per_class: defaults::samples_per_class(),
                test_samples_per_class: defaults::test_samples_per_class(),
                spread: defaults::spread(),
                data_seed: 0,
            },
            partition: PartitionConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig {
                aggregation: "gaa".into(),
                population: None,
                beta_mode: defaults::beta_mode(),
                fraction: defaults::fraction(),
                rounds: defaults::rounds(),
                local_epochs: defaults::local_epochs(),
                batch_size: defaults::batch_size(),
                lr: defaults::lr(),
                momentum: defaults::momentum(),
                weight_decay: defaults::weight_decay(),
            },
            eval_mc_samples: defaults::eval_mc_samples(),
            eval_stride: 1,
            ece_bins: DEFAULT_ECE_BINS,
            write_bins: false,
            seeds: defaults::seeds(),
            output: defaults::output(),
            processes: 1,
        }
    }
}
