use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::WindowConfig;
use crate::depth::DepthConfig;
use crate::frame2frame::PriorConfig;
use crate::solver::{LmOptions, TrimConfig};
use crate::tracking::{ClassTable, TrackerConfig};

use super::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemanticConfig {
    pub classes: ClassTable,
    /// Side of the square kernel eroding the dynamic mask, pixels.
    pub erosion_kernel: usize,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        Self {
            classes: ClassTable::default(),
            erosion_kernel: 21,
        }
    }
}

/// Every tunable of the pipeline, one TOML section per module.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub depth: DepthConfig,
    pub tracker: TrackerConfig,
    pub semantics: SemanticConfig,
    pub prior: PriorConfig,
    pub window: WindowConfig,
    pub trim: TrimConfig,
    pub solver: LmOptions,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serialises")
    }

    /// Applies a `section.key=value` override. The value is read as a TOML
    /// literal, falling back to a bare string. Unknown keys are rejected.
    pub fn set(&mut self, assignment: &str) -> Result<(), PipelineError> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| PipelineError::Config(format!("override `{assignment}` is not key=value")))?;
        let path = path.trim();
        let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.trim().to_string()),
        };
        let mut root = toml::Value::try_from(&*self).map_err(|e| PipelineError::Config(e.to_string()))?;
        let mut node = &mut root;
        let keys: Vec<&str> = path.split('.').collect();
        for (i, key) in keys.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| PipelineError::Config(format!("`{path}`: `{}` is not a section", keys[..i].join("."))))?;
            node = table
                .get_mut(*key)
                .ok_or_else(|| PipelineError::Config(format!("unknown configuration key `{path}`")))?;
        }
        *node = value;
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| PipelineError::Config(format!("`{assignment}`: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.depth.validate().map_err(PipelineError::Config)?;
        self.window.validate().map_err(PipelineError::Config)?;
        self.trim.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }
}
