//! Config files are TOML documents overlaid on a base config; keys left out
//! keep the base value.

use std::path::Path;

use anyhow::{anyhow, Context, Result};
use fedmoco_core::ExperimentConfig;
use toml::Value;

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Parses `text` on top of `base` and validates the result. Diagnostics name
/// the offending line or field.
pub fn overlay_config(base: &ExperimentConfig, text: &str) -> Result<ExperimentConfig> {
    let overlay: Value = text.parse::<toml::Table>().map(Value::Table).map_err(|e| anyhow!("{e}"))?;
    let mut merged = Value::try_from(base).context("serializing base config")?;
    merge(&mut merged, overlay);
    let cfg: ExperimentConfig = merged.try_into().map_err(|e: toml::de::Error| anyhow!("{}", e.message()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(base: &ExperimentConfig, path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    overlay_config(base, &text).with_context(|| format!("invalid config {}", path.display()))
}

pub fn to_toml(cfg: &ExperimentConfig) -> Result<String> {
    Ok(toml::to_string_pretty(cfg)?)
}
