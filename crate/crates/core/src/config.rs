//! Pipeline configuration and its key-value text format.
//!
//! The text format is one `section.key = value` assignment per line; blank
//! lines and lines starting with `#` are ignored. Keys mirror the field names
//! of [`PipelineConfig`], for example:
//!
//! ```text
//! # tighter variance window
//! cem.bvar_window_s = 0.05
//! salience.threshold = 0.55
//! align.match_gain = true
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::audio_io::AlignConfig;
use crate::cognitive_effects::{CemConfig, ImpsConstants};
use crate::distortion_metrics::{LoudnessConstants, MetricsConfig};
use crate::ear_model::EarModelConfig;
use crate::error::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpsConfig {
    /// Compute the legacy IMPS-weighted loudness series alongside the other metrics.
    pub enabled: bool,
    pub constants: ImpsConstants,
}

impl Default for ImpsConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            constants: ImpsConstants::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SalienceConfig {
    /// Minimum |r| for a CEM-DM interaction to be selected.
    pub threshold: f64,
    pub g_max: f64,
    pub max_rounds: usize,
    pub tolerance: f64,
    /// Contribution (MUSHRA points) under which an item's salience is left undefined.
    pub min_contribution: f64,
}

impl Default for SalienceConfig {
    fn default() -> Self {
        Self {
            threshold: 0.6,
            g_max: 2.0,
            max_rounds: 100,
            tolerance: 1e-6,
            min_contribution: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub monotone_premap: bool,
    pub pool_conditions: bool,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            monotone_premap: true,
            pool_conditions: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub align: AlignConfig,
    pub ear: EarModelConfig,
    pub loudness: LoudnessConstants,
    pub metrics: MetricsConfig,
    pub cem: CemConfig,
    pub imps: ImpsConfig,
    pub salience: SalienceConfig,
    pub evaluation: EvaluationConfig,
}

impl PipelineConfig {
    /// Applies one `section.key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut tree;
        for part in key.trim().split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        *slot = parse_like(slot, value.trim())
            .ok_or_else(|| Error::Config(format!("invalid value {value:?} for {key}")))?;
        let updated: PipelineConfig = serde_json::from_value(tree)
            .map_err(|e| Error::Config(format!("{key}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// Applies every assignment of a key-value text document.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: idx + 1,
                message: "expected `key = value`".into(),
            })?;
            self.set(key, value).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: idx + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::default();
        config.apply_text(&text, path)?;
        Ok(config)
    }

    /// Flattened `key = value` lines, the inverse of [`apply_text`](Self::apply_text).
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let tree = serde_json::to_value(self).expect("config serializes");
        let mut out = Vec::new();
        flatten("", &tree, &mut out);
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.ear.frame_plan().validate()?;
        let positive = [
            ("ear.smearing_time_constant_s", self.ear.smearing_time_constant_s),
            ("ear.modulation_time_constant_s", self.ear.modulation_time_constant_s),
            ("ear.modulation_s_min", self.ear.modulation_s_min),
            ("loudness.e0", self.loudness.e0),
            ("loudness.threshold_scale", self.loudness.threshold_scale),
            ("cem.pdev_window_s", self.cem.pdev_window_s),
            ("cem.bvar_window_s", self.cem.bvar_window_s),
            ("imps.constants.c", self.imps.constants.c),
            ("salience.tolerance", self.salience.tolerance),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.metrics.settling_s < 0.0 || self.salience.g_max < 0.0 {
            return Err(Error::Config("settling_s and g_max must be non-negative".into()));
        }
        if self.salience.max_rounds == 0 {
            return Err(Error::Config("salience.max_rounds must be >= 1".into()));
        }
        Ok(())
    }
}

fn parse_like(current: &Value, text: &str) -> Option<Value> {
    match current {
        Value::Bool(_) => match text {
            "true" | "1" | "yes" | "on" => Some(Value::Bool(true)),
            "false" | "0" | "no" | "off" => Some(Value::Bool(false)),
            _ => None,
        },
        Value::Number(n) if n.is_u64() => text.parse::<u64>().ok().map(Value::from),
        Value::Number(_) => text
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(Value::from),
        Value::String(_) => Some(Value::String(text.trim_matches('"').to_string())),
        _ => None,
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut Vec<(String, String)>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}
