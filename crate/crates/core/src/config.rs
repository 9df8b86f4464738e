//! Pipeline configuration, read from TOML. Unknown keys are rejected.
//!
//! ```toml
//! seed = 7
//!
//! [paths]
//! manifest = "data/manifest.jsonl"
//! image_root = "data"
//! work_dir = "work"
//!
//! [dataset]
//! split = [0.8, 0.1, 0.1]
//! tolerance = 2.0
//!
//! [augmentation]
//! copies = 5
//!
//! [network]
//! canvas = 32
//! conv_widths = [8, 16, 32]
//!
//! [training]
//! max_epochs = 150
//!
//! [evaluation]
//! threshold = 0.0333
//!
//! [[experiments]]
//! name = "two-stage-aug"
//! stages = 2
//! augment = true
//! ```
//!
//! Every section except `[paths]` may be omitted and then takes its defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationSpec;
use crate::error::{Error, Result};
use crate::eval::FAILURE_THRESHOLD;
use crate::net::train::TrainingSchedule;
use crate::net::{NetConfig, MAX_STAGES};
use crate::qc::DEFAULT_TOLERANCE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Input manifest, one JSON record per line.
    pub manifest: PathBuf,
    /// Directory that record image paths are relative to.
    pub image_root: PathBuf,
    /// Where every pipeline artifact is written.
    pub work_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetOptions {
    /// Train, validation, test fractions.
    pub split: [f64; 3],
    /// Label comparison tolerance in image pixels.
    pub tolerance: f64,
    /// Merge double labels even when they disagree.
    pub accept_flagged: bool,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            split: [0.8, 0.1, 0.1],
            tolerance: DEFAULT_TOLERANCE,
            accept_flagged: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationOptions {
    pub threshold: f64,
}

impl Default for EvaluationOptions {
    fn default() -> Self {
        Self {
            threshold: FAILURE_THRESHOLD,
        }
    }
}

/// One cell of the experiment grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    pub name: String,
    pub stages: usize,
    pub augment: bool,
}

/// The 1–2 stage × augmentation on/off grid.
pub fn default_experiments() -> Vec<Experiment> {
    let mut out = Vec::new();
    for stages in [1, 2] {
        for augment in [true, false] {
            out.push(Experiment {
                name: format!("stages{stages}-{}", if augment { "aug" } else { "noaug" }),
                stages,
                augment,
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds the split, augmentation, initialization and minibatch order.
    #[serde(default)]
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub dataset: DatasetOptions,
    #[serde(default)]
    pub augmentation: AugmentationSpec,
    #[serde(default)]
    pub network: NetConfig,
    #[serde(default)]
    pub training: TrainingSchedule,
    #[serde(default)]
    pub evaluation: EvaluationOptions,
    #[serde(default = "default_experiments")]
    pub experiments: Vec<Experiment>,
}

impl PipelineConfig {
    pub fn new(paths: Paths) -> Self {
        Self {
            seed: 0,
            paths,
            dataset: DatasetOptions::default(),
            augmentation: AugmentationSpec::default(),
            network: NetConfig::default(),
            training: TrainingSchedule::default(),
            evaluation: EvaluationOptions::default(),
            experiments: default_experiments(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            for p in [&mut cfg.paths.manifest, &mut cfg.paths.image_root, &mut cfg.paths.work_dir] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let mut net = self.network.clone();
        for e in &self.experiments {
            if !(1..=MAX_STAGES).contains(&e.stages) {
                return Err(Error::Config(format!("experiment {} has {} stages", e.name, e.stages)));
            }
            if e.name.is_empty() || e.name.contains(['/', '\\']) {
                return Err(Error::Config(format!("invalid experiment name {:?}", e.name)));
            }
            net.stages = e.stages;
            net.validate()?;
        }
        let mut names: Vec<&str> = self.experiments.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("experiment names must be unique".into()));
        }
        self.augmentation.validate()?;
        self.training.validate()?;
        if !(self.evaluation.threshold > 0.0) {
            return Err(Error::Config("evaluation threshold must be positive".into()));
        }
        Ok(())
    }

    pub fn experiment(&self, name: &str) -> Result<&Experiment> {
        self.experiments
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Config(format!("no experiment named {name:?}")))
    }
}
