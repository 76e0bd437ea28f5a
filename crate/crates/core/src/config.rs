//! TOML run configuration and the manifest written next to every output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segnet::{Network, TrunkConfig};
use crate::synth::{Dataset, SceneSpec};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub trunk: TrunkConfig,
    pub num_classes: usize,
    pub with_aux: bool,
    /// Seeds the parameter initialisation.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            trunk: TrunkConfig::default(),
            num_classes: 4,
            with_aux: true,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn build(&self) -> Result<Network> {
        Network::build(self.trunk.clone(), self.num_classes, self.with_aux, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub spec: SceneSpec,
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            spec: SceneSpec::default(),
            seed: 7,
            train_count: 512,
            val_count: 64,
        }
    }
}

impl SyntheticConfig {
    /// Training scenes come first in the stream, validation scenes after.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let train = Dataset::synthetic(&self.spec, self.seed, 0, self.train_count)?;
        let val = Dataset::synthetic(&self.spec, self.seed, self.train_count as u64, self.val_count)?;
        Ok((train, val))
    }
}

/// Where training data comes from: dataset directories, or generated
/// scenes when `train_dir` is unset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
}

impl DataConfig {
    pub fn load(&self) -> Result<(Dataset, Option<Dataset>)> {
        match &self.train_dir {
            Some(dir) => {
                let val = self.val_dir.as_deref().map(Dataset::load).transpose()?;
                Ok((Dataset::load(dir)?, val))
            }
            None => {
                let (train, val) = self.synthetic.datasets()?;
                Ok((train, (!val.is_empty()).then_some(val)))
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.trunk.validate()?;
        cfg.train.validate()?;
        cfg.data.synthetic.spec.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Record of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(subcommand: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            started_unix: unix_now(),
            finished_unix: 0,
            outputs: Vec::new(),
        }
    }

    /// Stamps the finish time and writes `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished_unix = unix_now();
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_toml_str("[train]\nbase_rate = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("base_rate"), "{err}");
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.train.epochs = 3;
        cfg.model.trunk.channels = vec![8, 16];
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml_str("[train]\ncrop = [30, 30]\n").is_err());
        assert!(RunConfig::from_toml_str("[model.trunk]\nchannels = [8]\n").is_err());
    }
}
