//! Run configuration: defaults, a JSON config file, then `--set` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use wavecp::trainer::TrainConfig;
use wavecp::xnetplus::{Branch, ModelConfig};
use wavecp::{Error, Result};

/// Network knobs that are not implied by the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOptions {
    /// `None` picks 16 in 2D and 8 in 3D.
    pub base_width: Option<usize>,
    pub depth: usize,
    pub branches: Vec<Branch>,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            base_width: None,
            depth: 4,
            branches: vec![Branch::Main, Branch::Low, Branch::High],
        }
    }
}

impl ModelOptions {
    pub fn resolve(&self, spatial_rank: usize, in_channels: usize, num_classes: usize) -> ModelConfig {
        let base = ModelConfig::new(spatial_rank, in_channels, num_classes);
        ModelConfig {
            base_width: self.base_width.unwrap_or(base.base_width),
            depth: self.depth,
            branches: self.branches.clone(),
            ..base
        }
    }

    pub fn of(model: &ModelConfig) -> Self {
        ModelOptions {
            base_width: Some(model.base_width),
            depth: model.depth,
            branches: model.branches.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelOptions,
    pub train: TrainConfig,
}

/// Parses an override value as JSON, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies `a.b.c=value` to a JSON tree, creating objects along the way.
pub fn apply_override(tree: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut node = tree;
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            return Err(Error::Config(format!("override `{key}` descends into a non-table value")));
        }
        node = node
            .as_object_mut()
            .unwrap()
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("override `{key}` descends into a non-table value")))?;
    obj.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Layers `file` and `overrides` over `base`; unknown keys are rejected.
pub fn resolve(base: &RunConfig, file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut tree = serde_json::to_value(base).expect("config serializes");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let layer: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut tree, layer);
    }
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    let config: RunConfig = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
    config.train.validate()?;
    Ok(config)
}

fn merge(dst: &mut Value, src: Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}
