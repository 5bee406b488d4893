//! Experiment configuration: one file describing data, features,
//! augmentation, model, head, training and output location.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio_io::{CANONICAL_RATE, MAX_SECONDS};
use crate::augment::AugmentConfig;
use crate::dataset::DEFAULT_RATIOS;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::heads::HeadConfig;
use crate::models::{ModelConfig, ModelSpec};
use crate::train::TrainConfig;

/// Where the clips come from. Exactly one of `crema_dir`, `manifest` and
/// `toy_per_class` must be set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Directory scanned recursively for `ActorID_Sentence_Emotion_Level.wav`.
    pub crema_dir: Option<PathBuf>,
    /// Manifest CSV written by `prepare`.
    pub manifest: Option<PathBuf>,
    /// Split JSON written by `prepare`; computed from the seed when absent.
    pub split_file: Option<PathBuf>,
    /// Synthesize the toy corpus in memory with this many clips per class.
    pub toy_per_class: Option<usize>,
    pub split_ratios: [f64; 3],
    /// Clips are zero-padded or cut to this length.
    pub max_seconds: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            crema_dir: None,
            manifest: None,
            split_file: None,
            toy_per_class: None,
            split_ratios: DEFAULT_RATIOS,
            max_seconds: MAX_SECONDS,
        }
    }
}

impl DatasetConfig {
    pub fn toy(n_per_class: usize) -> Self {
        Self {
            toy_per_class: Some(n_per_class),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sources = [
            self.crema_dir.is_some(),
            self.manifest.is_some(),
            self.toy_per_class.is_some(),
        ];
        match sources.iter().filter(|&&b| b).count() {
            1 => {}
            0 => {
                return Err(Error::config(
                    "dataset",
                    "set one of crema_dir, manifest or toy_per_class",
                ))
            }
            _ => {
                return Err(Error::config(
                    "dataset",
                    "crema_dir, manifest and toy_per_class are mutually exclusive",
                ))
            }
        }
        if self.toy_per_class == Some(0) {
            return Err(Error::config("dataset.toy_per_class", "must be ≥ 1"));
        }
        if self.toy_per_class.is_some() && self.split_file.is_some() {
            return Err(Error::config(
                "dataset.split_file",
                "the toy corpus is always split from the seed",
            ));
        }
        if !(self.max_seconds > 0.0 && self.max_seconds.is_finite()) {
            return Err(Error::config("dataset.max_seconds", "must be positive"));
        }
        let sum: f64 = self.split_ratios.iter().sum();
        if self.split_ratios.iter().any(|&r| !(r > 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::config(
                "dataset.split_ratios",
                "ratios must be positive and sum to 1",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed. It overrides `train.seed` and `augment.seed` and also
    /// drives the split, the toy corpus and initialization.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl ExperimentConfig {
    /// Toy corpus, toy patch transformer, MLP head, default training.
    pub fn toy() -> Self {
        Self {
            seed: 0,
            output_dir: default_output_dir(),
            dataset: DatasetConfig::toy(140),
            features: FeatureConfig::default(),
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
            head: HeadConfig::default(),
            train: TrainConfig::default(),
        }
    }

    /// Parse TOML, or JSON when the extension is `.json`. Relative dataset
    /// paths are taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let mut cfg = if is_json {
            Self::from_json_str(&text)?
        } else {
            Self::from_toml_str(&text)?
        };
        if let Some(base) = path.parent() {
            cfg.rebase_paths(base);
        }
        cfg.resolve()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            let msg = e.into_inner().message().trim().to_string();
            Error::config(field, msg)
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let field = e.path().to_string();
            Error::config(field, e.into_inner().to_string())
        })
    }

    fn rebase_paths(&mut self, base: &Path) {
        for p in [
            &mut self.dataset.crema_dir,
            &mut self.dataset.manifest,
            &mut self.dataset.split_file,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// Validate every section and propagate the master seed.
    pub fn resolve(mut self) -> Result<Self> {
        self.dataset.validate()?;
        self.augment.validate()?;
        self.train.validate()?;
        self.train.seed = self.seed;
        self.augment.seed = self.seed;
        let spec = self.model_spec().resolve()?;
        self.head = spec.head;
        if spec.model.input_kind() != crate::models::InputKind::Waveform {
            self.features.validate(CANONICAL_RATE)?;
        }
        Ok(self)
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            model: self.model.clone(),
            head: self.head.clone(),
            features: self.features.clone(),
        }
    }

    /// Short digest of everything except the output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&json)[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }
}
