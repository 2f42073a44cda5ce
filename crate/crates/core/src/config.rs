//! Pipeline configuration, loaded from TOML. Every section is optional and
//! falls back to its defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};
use crate::infer::InferenceConfig;
use crate::prototype::TrainConfig;
use crate::synth::SynthConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JitterSection {
    pub alpha_log_ratio: f64,
    pub sigma_jitter: f64,
}

impl Default for JitterSection {
    fn default() -> Self {
        Self {
            alpha_log_ratio: std::f64::consts::LN_2,
            sigma_jitter: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoLabelConfig {
    pub k: usize,
    pub top_n: usize,
    pub max_iter: usize,
    pub tol: f64,
    /// Drop proposals that cover annotated base objects before clustering.
    pub filter_base: bool,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            k: 20,
            top_n: 500,
            max_iter: 100,
            tol: 1e-6,
            filter_base: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub format_version: u32,
    pub seed: u64,
    pub synth: SynthConfig,
    pub attention: AttentionConfig,
    pub jitter: JitterSection,
    pub pseudolabel: PseudoLabelConfig,
    pub distill: TrainConfig,
    pub base: TrainConfig,
    pub prototype: TrainConfig,
    pub inference: InferenceConfig,
    /// Artifact locations that differ from the default layout, keyed by the
    /// default relative path.
    pub paths: BTreeMap<String, PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            format_version: CONFIG_VERSION,
            seed: 7,
            synth: SynthConfig::default(),
            attention: AttentionConfig::default(),
            jitter: JitterSection::default(),
            pseudolabel: PseudoLabelConfig::default(),
            distill: TrainConfig {
                learning_rate: 2.0,
                epochs: 12,
                batch_size: 64,
                tau: 1.0,
                seed: 0,
                lr_decay_epochs: vec![8, 11],
            },
            base: TrainConfig {
                learning_rate: 0.05,
                tau: 0.05,
                ..TrainConfig::default()
            },
            prototype: TrainConfig {
                learning_rate: 0.05,
                tau: 0.05,
                ..TrainConfig::default()
            },
            inference: InferenceConfig::default(),
            paths: BTreeMap::new(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        // check the version before the full parse so that files from a newer
        // format fail with a version error rather than a field error
        let raw: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        if let Some(v) = raw.get("format_version") {
            let found = v
                .as_integer()
                .ok_or_else(|| Error::config("format_version", "must be an integer"))?;
            if found != CONFIG_VERSION as i64 {
                return Err(Error::VersionMismatch {
                    path: origin.to_path_buf(),
                    expected: CONFIG_VERSION,
                    found: found.clamp(0, u32::MAX as i64) as u32,
                });
            }
        }
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| {
            let key = e
                .message()
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "config".to_string());
            Error::config(key, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.attention.validate().map_err(|e| prefixed("attention", e))?;
        let j = &self.jitter;
        if !(j.alpha_log_ratio > 0.0 && j.alpha_log_ratio.is_finite()) {
            return Err(Error::config("jitter.alpha_log_ratio", "must be finite and > 0"));
        }
        if !(j.sigma_jitter >= 0.0 && j.sigma_jitter.is_finite()) {
            return Err(Error::config("jitter.sigma_jitter", "must be finite and >= 0"));
        }
        let p = &self.pseudolabel;
        if p.k == 0 {
            return Err(Error::config("pseudolabel.k", "must be >= 1"));
        }
        if p.top_n == 0 {
            return Err(Error::config("pseudolabel.top_n", "must be >= 1"));
        }
        if p.max_iter == 0 {
            return Err(Error::config("pseudolabel.max_iter", "must be >= 1"));
        }
        if !(p.tol >= 0.0) {
            return Err(Error::config("pseudolabel.tol", "must be >= 0"));
        }
        self.distill.validate("distill")?;
        self.base.validate("base")?;
        self.prototype.validate("prototype")?;
        self.inference.validate().map_err(|e| prefixed("inference", e))?;
        Ok(())
    }
}

fn prefixed(section: &str, e: Error) -> Error {
    match e {
        Error::InvalidConfig { key, reason } => Error::InvalidConfig {
            key: format!("{section}.{key}"),
            reason,
        },
        other => other,
    }
}
