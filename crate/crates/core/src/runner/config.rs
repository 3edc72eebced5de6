//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::active::{AlConfig, SelectionMode, Strategy};
use crate::error::{Error, Result};
use crate::metrics::Phase;
use crate::model::ModelConfig;

fn default_noise() -> f64 {
    0.1
}
fn default_moons_test() -> usize {
    200
}
fn default_cluster_test() -> usize {
    50
}
fn default_ood_size() -> usize {
    400
}
fn default_al_pool() -> usize {
    10_000
}
fn default_csv_test() -> usize {
    300
}

/// Where the data of an experiment comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Two-moons training data with the four update clusters as new data.
    /// The test set holds moons points and cluster points; OOD samples lie
    /// on a frame around the data.
    TwoMoons {
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default = "default_moons_test")]
        test_size: usize,
        /// Test points per update cluster.
        #[serde(default = "default_cluster_test")]
        cluster_test: usize,
        #[serde(default = "default_ood_size")]
        ood_size: usize,
        /// Size of the unlabeled pool for active learning.
        #[serde(default = "default_al_pool")]
        al_pool: usize,
    },
    /// A tabular CSV file with a fixed holdout test set.
    Csv {
        path: PathBuf,
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        k: Option<usize>,
        #[serde(default = "default_csv_test")]
        test_size: usize,
        /// Dataset scored as out-of-distribution against this one.
        #[serde(default)]
        ood_path: Option<PathBuf>,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::TwoMoons {
            noise: default_noise(),
            test_size: default_moons_test(),
            cluster_test: default_cluster_test(),
            ood_size: default_ood_size(),
            al_pool: default_al_pool(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Protocol {
    pub n_train: Vec<usize>,
    pub n_new: usize,
    pub seeds: Vec<u64>,
    pub phases: Vec<Phase>,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            n_train: (1..=20).map(|i| 16 * i).collect(),
            n_new: 32,
            seeds: (0..10).collect(),
            phases: vec![Phase::Baseline, Phase::Update, Phase::Retrain],
        }
    }
}

/// One-variable-at-a-time sweep over a model hyperparameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    /// Field of the model config, nested fields joined by dots.
    pub parameter: String,
    pub values: Vec<serde_json::Value>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlArm {
    pub strategy: Strategy,
    pub mode: SelectionMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub protocol: Protocol,
    pub ablation: Option<AblationSpec>,
    pub al: AlConfig,
    /// Strategy/mode pairs run by `al`; empty means the single pair in `al`.
    pub al_arms: Vec<AlArm>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            protocol: Protocol::default(),
            ablation: None,
            al: AlConfig::default(),
            al_arms: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    /// Reads a config; relative dataset paths resolve against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let DatasetSpec::Csv { path, ood_path, .. } = &mut cfg.dataset {
            if path.is_relative() {
                *path = base.join(&*path);
            }
            if let Some(p) = ood_path {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let p = &self.protocol;
        if p.n_train.is_empty() || p.seeds.is_empty() {
            return Err(Error::Config("protocol needs at least one n_train and one seed".into()));
        }
        if p.n_new == 0 || p.n_train.contains(&0) {
            return Err(Error::Config("n_train and n_new must be positive".into()));
        }
        if !p.phases.contains(&Phase::Baseline) && !p.phases.is_empty() {
            return Err(Error::Config("the update and retrain phases need the baseline phase".into()));
        }
        if let Some(a) = &self.ablation {
            if a.values.is_empty() {
                return Err(Error::Config(format!("ablation of '{}' has no values", a.parameter)));
            }
        }
        Ok(())
    }

    /// Replaces the seed list by a single seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.protocol.seeds = vec![seed];
        self.al.seeds = vec![seed];
    }

    /// Model config with `parameter` (dot path) set to `value`.
    pub fn model_with(&self, parameter: &str, value: &serde_json::Value) -> Result<ModelConfig> {
        let mut tree = serde_json::to_value(&self.model)?;
        let mut node = &mut tree;
        for key in parameter.split('.') {
            node = node
                .as_object_mut()
                .and_then(|o| o.get_mut(key))
                .ok_or_else(|| Error::Config(format!("unknown model hyperparameter '{parameter}'")))?;
        }
        *node = value.clone();
        let cfg: ModelConfig = serde_json::from_value(tree)
            .map_err(|e| Error::Config(format!("bad value {value} for '{parameter}': {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn arms(&self) -> Vec<AlArm> {
        if self.al_arms.is_empty() {
            vec![AlArm {
                strategy: self.al.strategy,
                mode: self.al.mode,
            }]
        } else {
            self.al_arms.clone()
        }
    }
}
