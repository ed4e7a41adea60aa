//! Config file schemas, one per subcommand. Every field has a default, so a
//! file only lists what differs from it; command-line flags override the
//! file. Unknown keys are rejected so typos surface before any work starts.

use std::path::{Path, PathBuf};

use mlab_core::attribution::{LearnedMaskParams, LimeParams};
use mlab_core::data::SyntheticDatasetSpec;
use mlab_core::experiments::{
    AblationConfig, BiasSweepConfig, ConsistencyConfig, PartitionSpec, Schedule,
};
use mlab_core::missingness::{MissingnessSpec, RemovalOrder};
use mlab_core::nn::{CnnConfig, MissingnessAugment, ModelConfig, TrainParams};
use mlab_core::superpixels::SlicParams;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Reads a TOML config, or the defaults when no file is given.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::ConfigFile {
        path: path.to_path_buf(),
        message: e.message().to_string(),
    })
}

/// Serializes a config back to TOML, e.g. to record what a run used.
pub fn to_toml<T: Serialize>(config: &T) -> Result<String> {
    toml::to_string(config).map_err(|e| CliError::Invalid(e.to_string()))
}

/// Replaces every seed a config carries with one value.
pub trait Seeded {
    fn set_seed(&mut self, seed: u64);
}

fn reseed_sweep(sweep: &mut BiasSweepConfig, seed: u64) {
    sweep.spec.seed = seed;
    for order in &mut sweep.orders {
        if let RemovalOrder::Random { seed: s } = order {
            *s = seed;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataJob {
    pub out: PathBuf,
    pub dataset: SyntheticDatasetSpec,
}

impl Default for GenDataJob {
    fn default() -> Self {
        Self {
            out: "data".into(),
            dataset: SyntheticDatasetSpec::default(),
        }
    }
}

impl Seeded for GenDataJob {
    fn set_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainJob {
    pub data: PathBuf,
    pub out: PathBuf,
    pub id: String,
    pub model: ModelConfig,
    pub train: TrainParams,
    /// Random-removal augmentation for retrained (ROAR-style) models.
    pub augment: Option<MissingnessAugment>,
}

impl Default for TrainJob {
    fn default() -> Self {
        Self {
            data: "data".into(),
            out: "model.bin".into(),
            id: "model".into(),
            model: ModelConfig::Cnn(CnnConfig::default()),
            train: TrainParams::default(),
            augment: None,
        }
    }
}

impl Seeded for TrainJob {
    fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasSweepJob {
    pub data: PathBuf,
    pub model: PathBuf,
    /// Model whose saliency orders the regions; defaults to the evaluated
    /// model when that is a CNN.
    pub saliency_model: Option<PathBuf>,
    /// Number of test images used; all when absent.
    pub n_eval: Option<usize>,
    pub out: PathBuf,
    pub sweep: BiasSweepConfig,
}

impl Default for BiasSweepJob {
    fn default() -> Self {
        Self {
            data: "data".into(),
            model: "model.bin".into(),
            saliency_model: None,
            n_eval: None,
            out: "results/bias_sweep".into(),
            sweep: BiasSweepConfig::default(),
        }
    }
}

impl Seeded for BiasSweepJob {
    fn set_seed(&mut self, seed: u64) {
        reseed_sweep(&mut self.sweep, seed);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoarJob {
    pub data: PathBuf,
    pub standard: PathBuf,
    pub retrained: PathBuf,
    pub saliency_model: Option<PathBuf>,
    pub n_eval: Option<usize>,
    pub out: PathBuf,
    pub sweep: BiasSweepConfig,
}

impl Default for RoarJob {
    fn default() -> Self {
        Self {
            data: "data".into(),
            standard: "model.bin".into(),
            retrained: "retrained.bin".into(),
            saliency_model: None,
            n_eval: None,
            out: "results/roar".into(),
            sweep: BiasSweepConfig {
                fractions: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
                ..BiasSweepConfig::default()
            },
        }
    }
}

impl Seeded for RoarJob {
    fn set_seed(&mut self, seed: u64) {
        reseed_sweep(&mut self.sweep, seed);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimeJob {
    pub data: PathBuf,
    pub model: PathBuf,
    pub n_eval: Option<usize>,
    /// Explanations file (JSON).
    pub out: PathBuf,
    pub partition: PartitionSpec,
    pub spec: MissingnessSpec,
    pub lime: LimeParams,
    pub schedule: Schedule,
}

impl Default for LimeJob {
    fn default() -> Self {
        Self {
            data: "data".into(),
            model: "model.bin".into(),
            n_eval: None,
            out: "explanations/lime.json".into(),
            partition: PartitionSpec::default(),
            spec: MissingnessSpec::black(),
            lime: LimeParams::default(),
            schedule: Schedule::Serial,
        }
    }
}

impl Seeded for LimeJob {
    fn set_seed(&mut self, seed: u64) {
        self.lime.seed = seed;
        self.spec.seed = seed;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnedMaskJob {
    pub data: PathBuf,
    pub model: PathBuf,
    pub n_eval: Option<usize>,
    pub out: PathBuf,
    pub partition: PartitionSpec,
    pub mask: LearnedMaskParams,
    pub schedule: Schedule,
}

impl Default for LearnedMaskJob {
    fn default() -> Self {
        Self {
            data: "data".into(),
            model: "model.bin".into(),
            n_eval: None,
            out: "explanations/learned_mask.json".into(),
            partition: PartitionSpec::default(),
            mask: LearnedMaskParams::default(),
            schedule: Schedule::Serial,
        }
    }
}

impl Seeded for LearnedMaskJob {
    fn set_seed(&mut self, seed: u64) {
        self.mask.seed = seed;
        self.mask.baseline.seed = seed;
    }
}

/// Precomputed explanations to ablate, one per evaluation image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceFile {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateJob {
    pub data: PathBuf,
    pub model: PathBuf,
    pub n_eval: Option<usize>,
    pub out: PathBuf,
    pub sources: Vec<SourceFile>,
    /// Adds a `random` source with seeded random scores.
    pub random_baseline: bool,
    pub random_seed: u64,
    pub ablation: AblationConfig,
}

impl Default for AblateJob {
    fn default() -> Self {
        Self {
            data: "data".into(),
            model: "model.bin".into(),
            n_eval: None,
            out: "results/ablation".into(),
            sources: Vec::new(),
            random_baseline: true,
            random_seed: 0,
            ablation: AblationConfig::default(),
        }
    }
}

impl Seeded for AblateJob {
    fn set_seed(&mut self, seed: u64) {
        self.random_seed = seed;
        self.ablation.spec.seed = seed;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistencyJob {
    pub data: PathBuf,
    pub model: PathBuf,
    pub n_eval: Option<usize>,
    pub out: PathBuf,
    pub consistency: ConsistencyConfig,
}

impl Default for ConsistencyJob {
    fn default() -> Self {
        Self {
            data: "data".into(),
            model: "model.bin".into(),
            n_eval: None,
            out: "results/consistency".into(),
            consistency: ConsistencyConfig::default(),
        }
    }
}

impl Seeded for ConsistencyJob {
    fn set_seed(&mut self, seed: u64) {
        self.consistency.lime.seed = seed;
        self.consistency.random_seed = seed;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlicJob {
    pub data: PathBuf,
    /// Dataset split to segment: `train` or `test`.
    pub split: String,
    pub n_images: Option<usize>,
    pub out: PathBuf,
    pub params: SlicParams,
}

impl Default for SlicJob {
    fn default() -> Self {
        Self {
            data: "data".into(),
            split: "test".into(),
            n_images: None,
            out: "results/slic".into(),
            params: SlicParams::default(),
        }
    }
}

impl Seeded for SlicJob {
    /// Segmentation involves no randomness; the seed is accepted so every
    /// subcommand takes the same flags.
    fn set_seed(&mut self, _seed: u64) {}
}
