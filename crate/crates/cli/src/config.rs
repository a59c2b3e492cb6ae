//! Run-config resolution: preset, then config file, then `--set` overrides.

use std::fmt;
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use concur_core::train::RunConfig;
use serde_json::{Map, Value};

/// Marks a usage or configuration problem (exit code 1).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(ConfigError(msg.into()))
}

/// Recursively merges `patch` into `base`; objects merge, everything else
/// replaces.
pub fn deep_merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Turns `a.b.c=value` into `{"a": {"b": {"c": value}}}`. The value is read
/// as JSON when it parses, otherwise as a bare string.
pub fn parse_override(spec: &str) -> Result<Value> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{spec}` is not of the form key=value")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(config_err(format!("override `{spec}` has an empty key")));
    }
    let mut value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    for key in path.rsplit('.') {
        let mut m = Map::new();
        m.insert(key.to_string(), value);
        value = Value::Object(m);
    }
    Ok(value)
}

pub struct Sources<'a> {
    pub config: Option<&'a Path>,
    pub preset: Option<&'a str>,
    pub overrides: &'a [String],
    pub seed: Option<u64>,
}

/// Builds the run config. The preset comes from `--preset`, else the file's
/// `"preset"` key, else `desk`; unknown keys anywhere are rejected.
pub fn resolve(src: &Sources) -> Result<RunConfig> {
    let mut file = match src.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str::<Value>(&text).map_err(|e| {
                config_err(format!("config {} is not valid JSON: {e}", path.display()))
            })?
        }
        None => Value::Object(Map::new()),
    };
    let obj = file
        .as_object_mut()
        .ok_or_else(|| config_err("config file must hold a JSON object"))?;
    let file_preset = match obj.remove("preset") {
        Some(Value::String(s)) => Some(s),
        Some(other) => {
            return Err(config_err(format!(
                "\"preset\" must be a string, got {other}"
            )))
        }
        None => None,
    };
    let name = src
        .preset
        .map(str::to_string)
        .or(file_preset)
        .unwrap_or_else(|| "desk".into());
    let preset = RunConfig::preset(&name).ok_or_else(|| {
        config_err(format!(
            "unknown preset `{name}` (expected desk or paper-scale)"
        ))
    })?;

    let mut merged = serde_json::to_value(&preset).context("serializing preset")?;
    deep_merge(&mut merged, file);
    for o in src.overrides {
        deep_merge(&mut merged, parse_override(o)?);
    }
    if let Some(seed) = src.seed {
        deep_merge(&mut merged, serde_json::json!({ "seed": seed }));
    }
    let cfg: RunConfig =
        serde_json::from_value(merged).map_err(|e| config_err(format!("invalid config: {e}")))?;
    cfg.validate().map_err(|e| config_err(e.to_string()))?;
    Ok(cfg)
}
