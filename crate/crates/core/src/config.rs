//! JSON experiment documents: network, data source, training and diagnostics.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, TextureParams};
use crate::engine::NetworkSpec;
use crate::error::{Error, Result};
use crate::tensor::Shape;
use crate::train::TrainConfig;

/// A network given inline or as a path to a network JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetworkSource {
    File(PathBuf),
    Inline(NetworkSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// CIFAR-10 binary batches, optionally truncated to the first `limit`
    /// training images. When `dir` lacks the files and `fallback` is set,
    /// synthetic textures of the same shape are used instead.
    Cifar10 {
        dir: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default)]
        fallback: Option<TextureConfig>,
    },
    Textures(TextureConfig),
    Blobs {
        n: usize,
        classes: usize,
        features: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_separation() -> f64 {
    10.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureConfig {
    pub n: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_side")]
    pub side: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_classes() -> usize {
    data::CIFAR_CLASSES
}
fn default_side() -> usize {
    data::CIFAR_SIDE
}
fn default_noise() -> f64 {
    TextureParams::default().noise
}

impl TextureConfig {
    pub fn load(&self) -> Result<Dataset> {
        let params = TextureParams {
            channels: data::CIFAR_CHANNELS,
            side: self.side,
            noise: self.noise,
        };
        data::synth_textures(self.seed, self.n, self.classes, params)?.standardize(self.classes)
    }
}

impl DataConfig {
    /// Loads the dataset; relative paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        match self {
            DataConfig::Cifar10 { dir, limit, fallback } => {
                let dir = base.join(dir);
                let present = data::CIFAR_TRAIN_FILES.iter().all(|f| dir.join(f).is_file());
                match (present, fallback) {
                    (false, Some(tex)) => {
                        eprintln!(
                            "note: no CIFAR-10 batches in {}, using {} synthetic texture images",
                            dir.display(),
                            tex.n
                        );
                        tex.load()
                    }
                    _ => {
                        let ds = data::load_cifar10(&dir)?;
                        Ok(limit.map_or(ds.clone(), |n| ds.take(n)))
                    }
                }
            }
            DataConfig::Textures(tex) => tex.load(),
            DataConfig::Blobs {
                n,
                classes,
                features,
                separation,
                seed,
            } => data::synth_blobs(*seed, *n, *classes, Shape::matrix(1, *features), *separation),
        }
    }
}

fn default_diag_batches() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagConfig {
    /// Batches averaged by the gradient-error report and the depth sweep.
    #[serde(default = "default_diag_batches")]
    pub batches: usize,
    /// Batch size for diagnostics; defaults to the training batch size.
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Channels of the chain networks built by the depth sweep.
    #[serde(default = "default_sweep_channels")]
    pub sweep_channels: usize,
}

fn default_sweep_channels() -> usize {
    8
}

impl Default for DiagConfig {
    fn default() -> Self {
        DiagConfig {
            batches: default_diag_batches(),
            batch_size: None,
            sweep_channels: default_sweep_channels(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: NetworkSource,
    pub data: DataConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub diag: DiagConfig,
    /// Directory relative paths resolve against; the config file's own
    /// directory when loaded from disk.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        match &self.network {
            NetworkSource::Inline(spec) => Ok(spec.clone()),
            NetworkSource::File(p) => NetworkSpec::load(self.base_dir.join(p)),
        }
    }

    pub fn dataset(&self) -> Result<Dataset> {
        self.data.load(&self.base_dir)
    }

    pub fn diag_batch_size(&self) -> usize {
        self.diag.batch_size.unwrap_or(self.train.batch_size)
    }
}
