//! Run configuration, read from TOML and archived fully resolved.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{CoverageConfig, DiversityConfig};
use crate::networks::SkeletalConvSpec;
use crate::pyramid::ScaleConfig;
use crate::training::losses::LossWeights;
use crate::training::TrainingConfig;

/// Environment variable naming the default root for run outputs.
pub const OUTPUT_ROOT_ENV: &str = "MRMOTION_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Motion container files, one training sequence each.
    pub motions: Vec<PathBuf>,
    /// Feature files; paired ones name their motion clip.
    pub features: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub scale: ScaleConfig,
    pub conv: SkeletalConvSpec,
    pub loss: LossWeights,
    pub training: TrainingConfig,
    pub coverage: CoverageConfig,
    pub diversity: DiversityConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            dataset: DatasetConfig::default(),
            scale: ScaleConfig::default(),
            conv: SkeletalConvSpec::default(),
            loss: LossWeights::default(),
            training: TrainingConfig::default(),
            coverage: CoverageConfig::default(),
            diversity: DiversityConfig::default(),
        }
    }
}

fn absolute(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string().trim_end().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
        let base = std::path::absolute(&base).map_err(|e| Error::io(&base, e))?;
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in self.dataset.motions.iter_mut().chain(self.dataset.features.iter_mut()) {
            *p = absolute(base, p);
        }
        if let Some(o) = &mut self.output_dir {
            *o = absolute(base, o);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scale.validate()?;
        self.conv.validate()?;
        self.loss.validate()?;
        self.training.validate()?;
        let c = &self.coverage;
        if c.window_length == 0 || c.samples == 0 {
            return Err(Error::config("coverage window_length and samples must be positive"));
        }
        if matches!(c.eps_cov, Some(e) if !(e > 0.0)) {
            return Err(Error::config("coverage eps_cov must be positive"));
        }
        if !(0.0..=100.0).contains(&c.calibration_percentile) {
            return Err(Error::config("calibration_percentile must lie in [0, 100]"));
        }
        if self.diversity.t_min == 0 || self.diversity.t_d == 0 {
            return Err(Error::config("diversity window lengths must be positive"));
        }
        Ok(())
    }

    /// Every field materialized, defaults included.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }
}
