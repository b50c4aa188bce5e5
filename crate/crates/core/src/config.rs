//! Run configuration: JSON with defaults, unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::distill::SslMethod;
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::losses::LossConfig;
use crate::nn::ArchSpec;
use crate::optim::OptimizerConfig;
use crate::scenario::Regime;
use crate::train::{Strategy, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Cifar100,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// CIFAR-100 binary file (e.g. `train.bin`).
    pub path: Option<String>,
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub cluster_std: f64,
    /// Defaults to the task count for domain-incremental runs and 1 otherwise.
    pub n_domains: Option<usize>,
    pub domain_shift_strength: f64,
    /// Generator seed; the run seed when unset.
    pub seed: Option<u64>,
    /// Stratified fraction of every class held out for evaluation.
    pub eval_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            path: None,
            n_classes: 8,
            samples_per_class: 200,
            input_dim: 32,
            cluster_std: 1.0,
            n_domains: None,
            domain_shift_strength: 1.0,
            seed: None,
            eval_fraction: 0.2,
        }
    }
}

/// Encoder widths; the input width comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub backbone_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub projector_hidden: usize,
    pub proj_dim: usize,
    /// Prediction-head width for BYOL; the projector hidden width when unset.
    pub head_hidden: Option<usize>,
    /// Prototype count for SwAV; four per class when unset.
    pub prototypes: Option<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            backbone_hidden: vec![128],
            feature_dim: 64,
            projector_hidden: 64,
            proj_dim: 32,
            head_hidden: None,
            prototypes: None,
        }
    }
}

impl ArchConfig {
    pub fn spec(&self, input_dim: usize, method: SslMethod, n_classes: usize) -> ArchSpec {
        let mut backbone = vec![input_dim];
        backbone.extend(&self.backbone_hidden);
        backbone.push(self.feature_dim);
        ArchSpec {
            backbone,
            projector: vec![self.feature_dim, self.projector_hidden, self.proj_dim],
            head_hidden: (method == SslMethod::Byol).then(|| self.head_hidden.unwrap_or(self.projector_hidden)),
            prototypes: (method == SslMethod::Swav).then(|| self.prototypes.unwrap_or(4 * n_classes.max(1))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnnConfig {
    pub enabled: bool,
    pub k: usize,
    pub temperature: f64,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig { enabled: false, k: 20, temperature: 0.07 }
    }
}

fn default_strategy() -> Strategy {
    Strategy::Cassle
}

fn default_tasks() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: SslMethod,
    pub scenario: Regime,
    pub seed: u64,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default = "default_tasks")]
    pub tasks: usize,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub losses: LossConfig,
    #[serde(default)]
    pub augment: AugmentPolicy,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub knn: KnnConfig,
}

impl RunConfig {
    pub fn new(method: SslMethod, scenario: Regime, seed: u64) -> Self {
        RunConfig {
            method,
            scenario,
            seed,
            strategy: default_strategy(),
            tasks: default_tasks(),
            data: DataConfig::default(),
            arch: ArchConfig::default(),
            training: TrainConfig::default(),
            optimizer: OptimizerConfig::default(),
            losses: LossConfig::default(),
            augment: AugmentPolicy::default(),
            probe: ProbeConfig::default(),
            knn: KnnConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 {
            return Err(Error::config("tasks", "must be at least 1"));
        }
        let d = &self.data;
        if d.source == DataSource::Cifar100 && d.path.is_none() {
            return Err(Error::config("data.path", "required for cifar100"));
        }
        if !(d.eval_fraction > 0.0 && d.eval_fraction < 1.0) {
            return Err(Error::config("data.eval_fraction", "must lie in (0, 1)"));
        }
        if d.n_domains == Some(0) {
            return Err(Error::config("data.n_domains", "must be positive"));
        }
        let a = &self.arch;
        if a.feature_dim == 0 || a.projector_hidden == 0 || a.proj_dim == 0 || a.backbone_hidden.contains(&0) {
            return Err(Error::config("arch", "zero-width layer"));
        }
        if a.head_hidden == Some(0) {
            return Err(Error::config("arch.head_hidden", "must be positive"));
        }
        if a.prototypes == Some(0) {
            return Err(Error::config("arch.prototypes", "must be positive"));
        }
        self.training.validate()?;
        self.optimizer.validate()?;
        self.losses.validate()?;
        self.augment.validate()?;
        self.probe.validate()?;
        if self.knn.k == 0 {
            return Err(Error::config("knn.k", "must be positive"));
        }
        if !(self.knn.temperature > 0.0) {
            return Err(Error::config("knn.temperature", "must be > 0"));
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    pub fn n_domains(&self) -> usize {
        match self.data.n_domains {
            Some(n) => n,
            None if self.scenario == Regime::DomainInc => self.tasks,
            None => 1,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses and validates a configuration document.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        match inner.classify() {
            serde_json::error::Category::Data => Error::config(if path == "." { "<root>".into() } else { path }, inner.to_string()),
            _ => Error::Parse(inner.to_string()),
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let bytes = std::fs::read(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Parse(format!("{} is not UTF-8", path.display())))?;
    parse_config_str(&text)
}
