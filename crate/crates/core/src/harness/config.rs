use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BackboneKind};
use crate::error::{Error, Result};
use crate::imgproc::HairRemoval;
use crate::loss::LossWeights;
use crate::model::{ArchConfig, BaSource, ModelConfig, Preprocess, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Network input side; a multiple of 32.
    pub side: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { side: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Hair removal on or off.
    pub enabled: bool,
    pub threshold: u8,
    pub kernel: usize,
    pub radius: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        let h = HairRemoval::default();
        Self {
            enabled: true,
            threshold: h.threshold,
            kernel: h.kernel,
            radius: h.radius,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub backbone: BackboneKind,
    pub ba_source: BaSource,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Res2netToy,
            ba_source: BaSource::Level3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvConfig {
    pub folds: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { folds: 5 }
    }
}

/// Every knob of an experiment, read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub cv: CvConfig,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            data: DataConfig::default(),
            preprocess: PreprocessConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            cv: CvConfig::default(),
        }
    }
}

impl HarnessConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        crate::backbone::Backbone::check_input(self.data.side, self.data.side)?;
        self.train.validate()?;
        self.loss.validate()?;
        crate::imgproc::cross_element(self.preprocess.kernel)?;
        if self.cv.folds < 2 {
            return Err(Error::Config(format!(
                "cv.folds must be at least 2, got {}",
                self.cv.folds
            )));
        }
        Ok(())
    }

    pub fn backbone(&self) -> BackboneConfig {
        match self.model.backbone {
            BackboneKind::Res2netToy => BackboneConfig::toy(),
            BackboneKind::Res2netFull => BackboneConfig::full(),
        }
    }

    /// Model configuration for `arch`, with this config's boundary routing.
    pub fn model_config(&self, arch: &ArchConfig) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone(),
            arch: ArchConfig {
                ba_source: self.model.ba_source,
                ..arch.clone()
            },
        }
    }

    pub fn hair_removal(&self) -> HairRemoval {
        HairRemoval {
            threshold: self.preprocess.threshold,
            kernel: self.preprocess.kernel,
            radius: self.preprocess.radius,
        }
    }

    pub fn preprocess(&self) -> Preprocess {
        Preprocess {
            side: self.data.side,
            hair: self.preprocess.enabled.then(|| self.hair_removal()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_and_partial_files() {
        let cfg = HarnessConfig::default();
        assert_eq!(HarnessConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = HarnessConfig::from_toml("seed = 7\n[loss]\ndelta = 0.5\n").unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.loss.delta, 0.5);
        assert_eq!(partial.loss.pool_k, 31);
        assert!(HarnessConfig::from_toml("[loss]\ndelta = 2.0\n").is_err());
        assert!(HarnessConfig::from_toml("bogus = 1\n").is_err());
        assert!(HarnessConfig::from_toml("[data]\nside = 100\n").is_err());
    }
}
