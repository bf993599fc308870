//! Training configs as TOML.
//!
//! The file holds a top-level `format_version = 1` plus any subset of the
//! [`TrainConfig`] fields; missing fields take their defaults and unknown
//! fields are rejected.

use std::path::Path;

use egspo_core::TrainConfig;

use super::{read_text, write_atomic, FormatError, Result};

pub const VERSION: u64 = 1;
const FORMAT: &str = "config";

pub fn parse_str(text: &str) -> Result<TrainConfig> {
    let schema = |d: String| FormatError::schema(FORMAT, None, d);
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| schema(e.to_string()))?;
    match table.remove("format_version") {
        None => return Err(schema("missing format_version".into())),
        Some(toml::Value::Integer(v)) if v >= 1 && v as u64 <= VERSION => {}
        Some(toml::Value::Integer(v)) if v > 1 => {
            return Err(FormatError::Version {
                format: FORMAT,
                found: v as u64,
                supported: VERSION,
            })
        }
        Some(other) => {
            return Err(schema(format!(
                "format_version must be a positive integer, got {other}"
            )))
        }
    }
    let config: TrainConfig = table.try_into().map_err(|e: toml::de::Error| schema(e.to_string()))?;
    config.validate().map_err(|e| schema(e.to_string()))?;
    Ok(config)
}

pub fn to_string(config: &TrainConfig) -> Result<String> {
    let body = toml::to_string(config).map_err(|e| FormatError::schema(FORMAT, None, e.to_string()))?;
    Ok(format!("format_version = {VERSION}\n\n{body}"))
}

pub fn read(path: &Path) -> Result<TrainConfig> {
    parse_str(&read_text(path)?)
}

pub fn write(path: &Path, config: &TrainConfig) -> Result<()> {
    write_atomic(path, to_string(config)?.as_bytes())
}
