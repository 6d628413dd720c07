use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::crf::CrfParams;
use crate::error::{Error, Result};
use crate::grabcut::GrabcutConfig;
use crate::grid::NormalizeMode;
use crate::metrics::AvdMode;
use crate::nn::{NetConfig, TrainConfig};
use crate::phantom::PhantomSpec;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub seed: u64,
    pub paths: Paths,
    pub phantoms: PhantomSpec,
    pub preprocess: PreprocessConfig,
    pub grabcut: GrabcutConfig,
    pub clustering: ClusteringConfig,
    pub network: NetConfig,
    pub train: TrainConfig,
    pub crf: CrfParams,
    pub refine: RefineConfig,
    pub evaluate: EvaluateConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            paths: Paths::default(),
            phantoms: PhantomSpec::default(),
            preprocess: PreprocessConfig::default(),
            grabcut: GrabcutConfig::default(),
            clustering: ClusteringConfig::default(),
            network: NetConfig::default(),
            train: TrainConfig::default(),
            crf: CrfParams::default(),
            refine: RefineConfig::default(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

/// Relative paths are resolved against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory that `image_path` entries of the annotation CSV are relative to.
    pub images: PathBuf,
    pub annotations: PathBuf,
    /// Directory of `<lesion_id>.png` reference masks used by `evaluate`.
    pub ground_truth: Option<PathBuf>,
    /// CSV of `lesion_id,archetype`, written by `gen-phantoms`.
    pub archetypes: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            images: "data/images".into(),
            annotations: "data/annotations.csv".into(),
            ground_truth: Some("data/gt".into()),
            archetypes: Some("data/archetypes.csv".into()),
            output: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Side of the square network input.
    pub size: usize,
    pub normalize: NormalizeMode,
    /// Context kept around the RECIST endpoints when cropping a lesion, pixels.
    pub roi_margin: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { size: 128, normalize: NormalizeMode::MinMax, roi_margin: 24 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    /// Intensity histogram and RECIST geometry.
    Handcrafted,
    /// Vectors read from `clustering.embeddings` (`lesion_id,f0,f1,...`).
    Precomputed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// All within-cluster pairs, optionally capped per cluster.
    Cluster,
    /// As many pairs as `cluster` would give, drawn ignoring clusters.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    pub k: usize,
    pub features: FeatureMode,
    pub embeddings: Option<PathBuf>,
    pub standardize: bool,
    pub max_iterations: usize,
    /// Independent k-means++ initializations; the lowest inertia is kept.
    pub restarts: usize,
    pub split_ratios: [f64; 3],
    pub cap_per_cluster: Option<usize>,
    pub pairing: Pairing,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            k: 200,
            features: FeatureMode::Handcrafted,
            embeddings: None,
            standardize: true,
            max_iterations: 100,
            restarts: 10,
            split_ratios: [0.8, 0.1, 0.1],
            cap_per_cluster: None,
            pairing: Pairing::Cluster,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    /// Context kept around the RECIST endpoints for CRF refinement, pixels.
    /// Outside this window the network mask is kept as is.
    pub margin: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { margin: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub avd: AvdMode,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve(base);
        Ok(cfg)
    }

    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.images);
        fix(&mut self.paths.annotations);
        fix(&mut self.paths.output);
        self.paths.ground_truth.as_mut().map(fix);
        self.paths.archetypes.as_mut().map(fix);
        self.clustering.embeddings.as_mut().map(fix);
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version)));
        }
        if self.preprocess.size == 0 {
            return Err(Error::Config("preprocess.size must be positive".into()));
        }
        if self.clustering.k == 0 || self.clustering.restarts == 0 {
            return Err(Error::Config("clustering.k and clustering.restarts must be positive".into()));
        }
        let r = self.clustering.split_ratios;
        if r.iter().any(|v| !(*v >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("clustering.split_ratios must be non-negative and sum to 1, got {r:?}")));
        }
        if self.clustering.features == FeatureMode::Precomputed && self.clustering.embeddings.is_none() {
            return Err(Error::Config("clustering.features = \"precomputed\" needs clustering.embeddings".into()));
        }
        self.grabcut.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        self.crf.validate()?;
        Ok(())
    }
}
