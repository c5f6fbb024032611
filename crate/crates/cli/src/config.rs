//! Run configuration files: flat `key = value` lines, `#` comments, values
//! in TOML syntax (strings quoted). Unspecified keys take their defaults.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use depaint_core::RunConfig;
use serde::Deserialize;
use toml::{Table, Value};

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let table: Table = text
        .parse()
        .map_err(|e: toml::de::Error| anyhow!("config syntax: {}", e.message()))?;
    for (key, value) in &table {
        if matches!(value, Value::Table(_) | Value::Array(_)) {
            bail!(
                "config key `{key}`: expected a single value, found a {}",
                value.type_str()
            );
        }
        let mut single = Table::new();
        single.insert(key.clone(), value.clone());
        RunConfig::deserialize(single).map_err(|e| match e.message() {
            m if m.starts_with("unknown field") => anyhow!("config key `{key}` is not recognized"),
            m => anyhow!("config key `{key}`: {m}"),
        })?;
    }
    let cfg = RunConfig::deserialize(table).map_err(|e| anyhow!("config: {}", e.message()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    parse_config_str(&text).with_context(|| format!("in {}", path.display()))
}
