//! Dataset manifest: a TOML file naming the class list, the feature files and
//! every run setting. Relative paths resolve against the manifest's directory.
//!
//! ```toml
//! class_names = ["cat", "dog"]
//! seed = 0
//!
//! [files]
//! text = "text.embf"
//! test = "test.embf"
//! shots = "shots.embf"            # optional, labeled
//! val = "val.embf"                # optional, labeled
//! projections = "proj.dmnp"       # optional, few-shot mode
//!
//! [fusion]
//! alpha = [1.0, 1.0, 0.3]
//!
//! [readout]
//! beta = 5.5
//! logit_scale = 100.0
//! weighting = "sharpened-exp"     # or "soft-max"
//!
//! [memory]
//! length = 50
//!
//! [pipeline]
//! rho = 0.1
//!
//! [train]
//! epochs = 20
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::embf::{load_feature_set, validate_against, FeatureSet, TextClassifier};
use crate::pipeline::{FusionWeights, PipelineConfig, DEFAULT_MEMORY_LENGTH, DEFAULT_RHO};
use crate::readout::ReadoutConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFiles {
    pub text: PathBuf,
    pub test: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shots: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projections: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSection {
    pub alpha: [f64; 3],
}

impl Default for FusionSection {
    fn default() -> Self {
        let w = FusionWeights::default();
        Self {
            alpha: [w.alpha1, w.alpha2, w.alpha3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemorySection {
    pub length: usize,
}

impl Default for MemorySection {
    fn default() -> Self {
        Self {
            length: DEFAULT_MEMORY_LENGTH,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    pub rho: f64,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self { rho: DEFAULT_RHO }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub class_names: Vec<String>,
    #[serde(default)]
    pub seed: u64,
    pub files: ManifestFiles,
    #[serde(default)]
    pub fusion: FusionSection,
    #[serde(default)]
    pub readout: ReadoutConfig,
    #[serde(default)]
    pub memory: MemorySection,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(skip)]
    base_dir: PathBuf,
}

/// Everything a run reads from disk, checked for consistency.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub text: TextClassifier<f32>,
    pub test: FeatureSet,
    pub shots: Option<FeatureSet>,
    pub val: Option<FeatureSet>,
}

impl Manifest {
    pub fn new(class_names: Vec<String>, text: impl Into<PathBuf>, test: impl Into<PathBuf>) -> Self {
        Self {
            class_names,
            seed: 0,
            files: ManifestFiles {
                text: text.into(),
                test: test.into(),
                shots: None,
                val: None,
                projections: None,
            },
            fusion: FusionSection::default(),
            readout: ReadoutConfig::default(),
            memory: MemorySection::default(),
            pipeline: PipelineSection::default(),
            train: TrainConfig::default(),
            base_dir: PathBuf::new(),
        }
    }

    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut m: Manifest = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        m.base_dir = base_dir.into();
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new("")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn weights(&self) -> Result<FusionWeights> {
        let [a1, a2, a3] = self.fusion.alpha;
        FusionWeights::new(a1, a2, a3)
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        let cfg = PipelineConfig {
            readout: self.readout,
            weights: self.weights()?,
            rho: self.pipeline.rho,
            memory_length: self.memory.length,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Training settings, seeded from the manifest's top-level seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }

    fn load_labeled(&self, p: &Path, text: &TextClassifier<f32>) -> Result<FeatureSet> {
        let set = load_feature_set(self.resolve(p))?;
        validate_against(&set, text)?;
        if set.labels().is_none() {
            return Err(Error::Unlabeled);
        }
        Ok(set)
    }

    /// Loads every referenced file and checks class count, dimensions and labels.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let text = TextClassifier::<f32>::load(self.resolve(&self.files.text))?;
        if text.num_classes() != self.num_classes() {
            return Err(Error::LengthMismatch {
                left: text.num_classes(),
                right: self.num_classes(),
            });
        }
        let test = load_feature_set(self.resolve(&self.files.test))?;
        validate_against(&test, &text)?;
        let shots = self
            .files
            .shots
            .as_ref()
            .map(|p| self.load_labeled(p, &text))
            .transpose()?;
        let val = self
            .files
            .val
            .as_ref()
            .map(|p| self.load_labeled(p, &text))
            .transpose()?;
        Ok(Dataset {
            text,
            test,
            shots,
            val,
        })
    }
}
