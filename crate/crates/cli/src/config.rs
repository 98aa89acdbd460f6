//! Run configuration: one JSON document with a section per subsystem.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use tta_core::adapt::{AdaptConfig, PretrainConfig};
use tta_core::augment::AugmentationPolicy;
use tta_core::losses::LossConfig;
use tta_core::metrics::RegionSpec;
use tta_core::network::NetConfig;

use crate::phantom::{PhantomSpec, CLASS_COUNT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset written by `tta phantom`. When absent the phantom described
    /// by `phantom` is generated in memory from the run seed.
    pub dir: Option<PathBuf>,
    /// Source-model checkpoint used by `adapt`, `eval` and `ablate`.
    pub checkpoint: Option<PathBuf>,
    /// Edge length of the cubic network grid.
    pub grid: usize,
    pub phantom: PhantomSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            checkpoint: None,
            grid: 32,
            phantom: PhantomSpec::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub regions: RegionSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub net: NetConfig,
    pub pretrain: PretrainConfig,
    pub policy: AugmentationPolicy,
    pub loss: LossConfig,
    pub adapt: AdaptConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        let net = NetConfig {
            in_channels: data.phantom.modalities,
            class_count: CLASS_COUNT as usize,
            ..NetConfig::default()
        };
        RunConfig {
            data,
            net,
            pretrain: PretrainConfig::default(),
            policy: AugmentationPolicy::default(),
            loss: LossConfig::default(),
            adapt: AdaptConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Problems found while loading a configuration. Every variant maps to exit
/// code 2.
#[derive(Debug)]
pub enum ConfigError {
    Read { path: PathBuf, message: String },
    Parse(String),
    UnknownKeys(Vec<String>),
    Invalid(String),
}

impl ConfigError {
    pub fn to_json(&self) -> Value {
        match self {
            ConfigError::Read { path, message } => serde_json::json!({
                "error": "config_read",
                "path": path.display().to_string(),
                "message": message,
            }),
            ConfigError::Parse(message) => serde_json::json!({"error": "config_parse", "message": message}),
            ConfigError::UnknownKeys(keys) => serde_json::json!({
                "error": "unknown_config_keys",
                "keys": keys,
            }),
            ConfigError::Invalid(message) => serde_json::json!({"error": "config_invalid", "message": message}),
        }
    }
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.to_json())
    }
}

impl std::error::Error for ConfigError {}

/// Dotted paths of keys in `given` that have no counterpart in `reference`.
/// Array elements are checked against the first element of the reference
/// array; entries of a reference `null` are not inspected.
pub fn unknown_keys(given: &Value, reference: &Value) -> Vec<String> {
    let mut out = Vec::new();
    walk(given, reference, "", &mut out);
    out
}

fn walk(given: &Value, reference: &Value, prefix: &str, out: &mut Vec<String>) {
    match (given, reference) {
        (Value::Object(g), Value::Object(r)) => {
            for (k, v) in g {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match r.get(k) {
                    Some(rv) => walk(v, rv, &path, out),
                    None => out.push(path),
                }
            }
        }
        (Value::Array(g), Value::Array(r)) => {
            if let Some(first) = r.first() {
                for (i, v) in g.iter().enumerate() {
                    walk(v, first, &format!("{prefix}[{i}]"), out);
                }
            }
        }
        _ => {}
    }
}

/// Writes `top` over `base`, descending into objects present in both. Arrays
/// and scalars are replaced whole.
fn overlay(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, top) => *slot = top,
    }
}

impl RunConfig {
    /// Parses a configuration. Keys left out take the values of
    /// `RunConfig::default()`, so a partial `net` section keeps the input
    /// channel count that matches the phantom.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let value: Value = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let reference = serde_json::to_value(RunConfig::default()).expect("default config serializes");
        let unknown = unknown_keys(&value, &reference);
        if !unknown.is_empty() {
            return Err(ConfigError::UnknownKeys(unknown));
        }
        let mut merged = reference;
        overlay(&mut merged, value);
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Read {
                    path: p.to_path_buf(),
                    message: e.to_string(),
                })?;
                Self::from_json(&text)
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |section: &str, msg: String| Err(ConfigError::Invalid(format!("{section}: {msg}")));
        if self.data.grid < 8 {
            return invalid("data", format!("grid must be at least 8, got {}", self.data.grid));
        }
        if let Err(e) = self.data.phantom.validate() {
            return invalid("data.phantom", e);
        }
        if let Err(e) = self.net.validate() {
            return invalid("net", e);
        }
        if self.net.in_channels != self.data.phantom.modalities {
            return invalid(
                "net",
                format!(
                    "in_channels ({}) must equal data.phantom.modalities ({})",
                    self.net.in_channels, self.data.phantom.modalities
                ),
            );
        }
        if self.net.class_count != CLASS_COUNT as usize {
            return invalid("net", format!("class_count must be {CLASS_COUNT} for phantom data"));
        }
        if let Err(e) = self.pretrain.validate() {
            return invalid("pretrain", e);
        }
        if let Err(e) = self.policy.validate() {
            return invalid("policy", e.to_string());
        }
        if let Err(e) = self.loss.validate() {
            return invalid("loss", e);
        }
        if let Err(e) = self.adapt.validate() {
            return invalid("adapt", e);
        }
        if let Err(e) = self.eval.regions.validate(CLASS_COUNT) {
            return invalid("eval", e.to_string());
        }
        Ok(())
    }

    /// Canonical serialization used for hashing.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical_json().as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
