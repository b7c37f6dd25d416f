//! Pipeline configuration, read from a single TOML file.
//!
//! Every section and key is optional; omitted values take the defaults
//! below. Relative paths are resolved against the config file's directory.
//!
//! ```toml
//! [paths]
//! manifest = "data/manifest.json"
//! model_dir = "models"
//! output_dir = "out"
//! cache_dir = "cache"      # "" disables the observation cache
//!
//! [gabor]
//! num_frequencies = 5
//! num_orientations = 8
//! stride = 10
//!
//! [gmm.face]
//! components = 8
//!
//! [fusion]
//! alpha_face = 0.9
//! alpha_ear = 0.9
//! threshold = 0.5
//!
//! [eval]
//! sweep = 10001
//! seed = 0
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{FusionWeights, SynthSpec};
use crate::gabor::GaborParams;
use crate::gmm::EmConfig;
use crate::prep::{CanonicalLayout, Modality};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub manifest: PathBuf,
    pub model_dir: PathBuf,
    pub output_dir: PathBuf,
    pub cache_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.json"),
            model_dir: PathBuf::from("models"),
            output_dir: PathBuf::from("out"),
            cache_dir: PathBuf::from("cache"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaborConfig {
    #[serde(flatten)]
    pub params: GaborParams,
    /// Sampling stride for observation vectors.
    pub stride: usize,
}

impl Default for GaborConfig {
    fn default() -> Self {
        Self {
            params: GaborParams::default(),
            stride: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmConfig {
    pub face: EmConfig,
    pub ear: EmConfig,
}

impl GmmConfig {
    pub fn for_modality(&self, m: Modality) -> &EmConfig {
        match m {
            Modality::Face => &self.face,
            Modality::Ear => &self.ear,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub alpha_face: f64,
    pub alpha_ear: f64,
    /// Acceptance threshold on the combined genuine mass.
    pub threshold: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        let w = FusionWeights::default();
        Self {
            alpha_face: w.alpha_face,
            alpha_ear: w.alpha_ear,
            threshold: 0.5,
        }
    }
}

impl FusionConfig {
    pub fn weights(&self) -> FusionWeights {
        FusionWeights {
            alpha_face: self.alpha_face,
            alpha_ear: self.alpha_ear,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub sweep: usize,
    pub seed: u64,
    /// Score the gallery images as probes (a self-match sanity run).
    pub train_on_test: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sweep: crate::eval::DEFAULT_SWEEP,
            seed: 0,
            train_on_test: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub prep: CanonicalLayout,
    pub gabor: GaborConfig,
    pub gmm: GmmConfig,
    pub fusion: FusionConfig,
    pub eval: EvalConfig,
    pub synth: SynthSpec,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<string>"),
            message: e.to_string(),
        })
    }

    /// Reads, resolves relative paths against the file's directory, and
    /// validates.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: PipelineConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.manifest);
        fix(&mut self.paths.model_dir);
        fix(&mut self.paths.output_dir);
        fix(&mut self.paths.cache_dir);
    }

    /// Applies a seed to the evaluation and to both EM configurations.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.eval.seed = seed;
        self.gmm.face.seed = seed;
        self.gmm.ear.seed = seed;
        self
    }

    pub fn cache_dir(&self) -> Option<&Path> {
        let p = self.paths.cache_dir.as_path();
        (!p.as_os_str().is_empty()).then_some(p)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.paths.model_dir.as_os_str().is_empty()
            || self.paths.output_dir.as_os_str().is_empty()
        {
            return invalid("paths.model_dir and paths.output_dir must be nonempty".into());
        }
        if let Err(e) = self.gabor.params.validate() {
            return invalid(e.to_string());
        }
        if self.gabor.stride < 1 {
            return invalid("gabor.stride must be at least 1".into());
        }
        if self.prep.width == 0 || self.prep.height == 0 {
            return invalid("prep width and height must be nonzero".into());
        }
        for m in Modality::ALL {
            if let Err(e) = self.gmm.for_modality(m).validate() {
                return invalid(format!("gmm.{m}: {e}"));
            }
        }
        for (name, a) in [
            ("alpha_face", self.fusion.alpha_face),
            ("alpha_ear", self.fusion.alpha_ear),
        ] {
            if !(0.0..=1.0).contains(&a) {
                return invalid(format!("fusion.{name} = {a} is outside [0, 1]"));
            }
        }
        if !self.fusion.threshold.is_finite() {
            return invalid("fusion.threshold must be finite".into());
        }
        if self.eval.sweep < 2 {
            return invalid("eval.sweep must be at least 2".into());
        }
        Ok(())
    }
}
