//! Loading and saving the JSON experiment configuration.
//!
//! Missing fields take their defaults, unknown keys produce warnings, and the
//! result must pass [`ExperimentConfig::validate`].

use std::path::Path;

use serde_json::Value;
use stydeco_core::config::ExperimentConfig;

use crate::error::{Error, IoContext, Result};
use crate::fsutil::write_atomic;

/// Environment variable naming the config file for the CLI.
pub const CONFIG_ENV: &str = "STYDECO_CONFIG";

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    /// One entry per unknown key, e.g. ``unknown config key `lora.rnak` ``.
    pub warnings: Vec<String>,
}

fn unknown_keys(doc: &Value, reference: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(d), Value::Object(r)) = (doc, reference) else {
        return;
    };
    for (k, v) in d {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match r.get(k) {
            None => out.push(path),
            Some(rv) => unknown_keys(v, rv, &path, out),
        }
    }
}

/// Parses a config document; an empty or whitespace-only string yields the
/// defaults.
pub fn parse_config(text: &str) -> Result<LoadedConfig> {
    if text.trim().is_empty() {
        return Ok(LoadedConfig {
            config: ExperimentConfig::default(),
            warnings: Vec::new(),
        });
    }
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("parse error: {e}")))?;
    if !doc.is_object() {
        return Err(Error::Config("top level must be a JSON object".into()));
    }
    let reference = serde_json::to_value(ExperimentConfig::default()).expect("default config serializes");
    let mut unknown = Vec::new();
    unknown_keys(&doc, &reference, "", &mut unknown);
    let config: ExperimentConfig =
        serde_json::from_value(doc).map_err(|e| Error::Config(format!("parse error: {e}")))?;
    let report = config.validate();
    if !report.is_valid() {
        return Err(Error::Config(report.to_string()));
    }
    Ok(LoadedConfig {
        config,
        warnings: unknown
            .into_iter()
            .map(|k| format!("unknown config key `{k}` ignored"))
            .collect(),
    })
}

pub fn load_config(path: &Path) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(path).at(path)?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn config_to_string(cfg: &ExperimentConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serializes")
}

pub fn save_config(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    write_atomic(path, config_to_string(cfg).as_bytes())
}
