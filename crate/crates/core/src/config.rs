//! Run configuration: one TOML table per stage, every key defaulted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detect::DetectConfig;
use crate::error::{Error, Result};
use crate::hvae::{ArchConfig, GroupPlacement};
use crate::ingest::Format;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of series files, or a single file.
    pub path: Option<PathBuf>,
    pub format: Format,
    pub labels: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { path: None, format: Format::GenericCsv, labels: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub size: usize,
    /// Stride between training window centres; scoring always covers every step.
    pub step: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig { size: 64, step: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Default,
    Compact,
    Miniature,
}

/// Architecture preset with optional per-field overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: Preset,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub widths: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cells_per_scale: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_kernel: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<GroupPlacement>>,
}

impl ModelConfig {
    pub fn arch(&self, window: usize) -> Result<ArchConfig> {
        let mut a = match self.preset {
            Preset::Default => ArchConfig::default(),
            Preset::Compact => ArchConfig::compact(),
            Preset::Miniature => ArchConfig::miniature(),
        };
        a.window = window;
        if let Some(w) = &self.widths {
            a.widths = w.clone();
        }
        if let Some(c) = self.cells_per_scale {
            a.cells_per_scale = c;
        }
        if let Some(k) = self.head_kernel {
            a.head_kernel = k;
        }
        if let Some(g) = &self.groups {
            a.groups = g.clone();
        }
        a.validate()?;
        Ok(a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("runs/latest") }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub window: WindowConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub detect: DetectConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn arch(&self) -> Result<ArchConfig> {
        self.model.arch(self.window.size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window.step == 0 {
            return Err(Error::Config("window.step must be positive".into()));
        }
        self.train.validate()?;
        self.arch()?;
        for (name, v) in [("detect.theta", self.detect.theta), ("detect.lambda", self.detect.lambda)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}
