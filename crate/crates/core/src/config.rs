//! Layered run configuration: defaults, then a TOML file, then `key=value`
//! overrides. Every key lives in a named section and unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::altc::{SideInfoCompressor, DEFAULT_SIDE_DOWNSAMPLE, DEFAULT_T_MIN};
use crate::error::{Error, Result};
use crate::fbwt::{FbwtConfig, MergeMode};
use crate::tone::{TrimConfig, DEFAULT_ALPHA, DEFAULT_BETA};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n: usize,
    pub m: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { n: 64, m: 96 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AltcSection {
    pub enabled: bool,
    pub t_min: f64,
    pub downsample: usize,
}

impl Default for AltcSection {
    fn default() -> Self {
        AltcSection {
            enabled: true,
            t_min: DEFAULT_T_MIN,
            downsample: DEFAULT_SIDE_DOWNSAMPLE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FbwtSection {
    pub enabled: bool,
    pub merge_mode: MergeMode,
    pub window: usize,
    pub heads: usize,
}

impl Default for FbwtSection {
    fn default() -> Self {
        let d = FbwtConfig::default();
        FbwtSection {
            enabled: true,
            merge_mode: d.merge_mode,
            window: d.window,
            heads: d.heads,
        }
    }
}

impl FbwtSection {
    pub fn block_config(&self) -> FbwtConfig {
        FbwtConfig {
            window: self.window,
            heads: self.heads,
            merge_mode: self.merge_mode,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToneSection {
    pub alpha_l: f64,
    pub alpha_r: f64,
}

impl Default for ToneSection {
    fn default() -> Self {
        ToneSection {
            alpha_l: DEFAULT_ALPHA,
            alpha_r: DEFAULT_ALPHA,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda: f64,
    pub beta: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            lambda: 0.013,
            beta: DEFAULT_BETA,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub crop: usize,
    /// Additive uniform noise as the quantization proxy; off passes latents through.
    pub noise_quant: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 1e-4,
            batch_size: 8,
            steps: 1000,
            seed: 0,
            crop: 256,
            noise_quant: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SideInfoSection {
    pub compressor: SideInfoCompressor,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelSection,
    pub altc: AltcSection,
    pub fbwt: FbwtSection,
    pub tone: ToneSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub sideinfo: SideInfoSection,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl Config {
    /// Reads a TOML file over the defaults.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| config_err(e.message().to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// Applies one dotted `section.key=value` override. The value is read as
    /// a TOML literal when possible and as a bare string otherwise.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| config_err(format!("key '{key}' must be of the form section.key")))?;
        let mut root = toml::Table::try_from(&*self).expect("config serializes to a table");
        let table = root
            .get_mut(section)
            .and_then(|v| v.as_table_mut())
            .ok_or_else(|| config_err(format!("unknown config section '{section}'")))?;
        if !table.contains_key(field) {
            return Err(config_err(format!("unknown config key '{key}'")));
        }
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        // integers are accepted wherever a float is expected
        let parsed = match (&table[field], parsed) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, p) => p,
        };
        table.insert(field.to_string(), parsed);
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| config_err(format!("{key}: {}", e.message())))?;
        Ok(())
    }

    /// Defaults, then `file`, then each `key=value` in order.
    pub fn layered(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        for kv in overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| config_err(format!("override '{kv}' must be key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key as `(section.key, value)`, in section order.
    pub fn flatten(&self) -> Vec<(String, String)> {
        let root = toml::Table::try_from(self).expect("config serializes to a table");
        let mut out = Vec::new();
        for (section, v) in &root {
            if let Some(t) = v.as_table() {
                for (k, val) in t {
                    out.push((format!("{section}.{k}"), val.to_string()));
                }
            }
        }
        out
    }

    pub fn trim(&self) -> TrimConfig {
        TrimConfig {
            alpha_l: self.tone.alpha_l,
            alpha_r: self.tone.alpha_r,
        }
    }

    /// Checks the keys that shape the model and its bitstreams.
    pub fn validate_model(&self) -> Result<()> {
        let m = &self.model;
        if m.n == 0 || m.m == 0 {
            return Err(config_err("model.n and model.m must be positive"));
        }
        if self.altc.enabled {
            if !(self.altc.t_min > 0.0 && self.altc.t_min < 1.0) {
                return Err(config_err("altc.t_min must lie in (0, 1)"));
            }
            if !(1..=255).contains(&self.altc.downsample) {
                return Err(config_err("altc.downsample must lie in 1..=255"));
            }
        }
        if self.fbwt.enabled {
            if self.fbwt.window == 0 {
                return Err(config_err("fbwt.window must be positive"));
            }
            if self.fbwt.heads == 0 || !m.n.is_multiple_of(self.fbwt.heads) {
                return Err(config_err(format!(
                    "fbwt.heads={} must divide model.n={}",
                    self.fbwt.heads, m.n
                )));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_model()?;
        self.trim().validate()?;
        let (l, t) = (&self.loss, &self.train);
        if !(l.lambda > 0.0 && l.lambda.is_finite()) {
            return Err(config_err("loss.lambda must be positive"));
        }
        if !(l.beta >= 0.0 && l.beta.is_finite()) {
            return Err(config_err("loss.beta must be non-negative"));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(config_err("train.lr must be positive"));
        }
        if t.batch_size == 0 {
            return Err(config_err("train.batch_size must be positive"));
        }
        if t.crop < 32 || t.crop % self.pad_multiple() != 0 {
            return Err(config_err(format!(
                "train.crop={} must be ≥ 32 and a multiple of {}",
                t.crop,
                self.pad_multiple()
            )));
        }
        Ok(())
    }

    /// Spatial alignment needed by the transforms and the side-info grid.
    pub fn pad_multiple(&self) -> usize {
        let s = if self.altc.enabled { self.altc.downsample } else { 1 };
        lcm(16, s)
    }

    /// Canonical form of the model-shaping keys, part of the parameter hash.
    pub fn model_fingerprint(&self) -> String {
        serde_json::json!({
            "model": self.model,
            "altc": self.altc,
            "fbwt": self.fbwt,
            "sideinfo": self.sideinfo,
        })
        .to_string()
    }
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}
