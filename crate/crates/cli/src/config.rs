use std::path::Path;

use modaltune_core::pipeline::RunConfig;
use serde_json::Value;

use crate::error::{require, CliError, CliResult};

pub const SEED_ENV: &str = "MODALTUNE_SEED";

/// Reads `path` (or the desk defaults), then applies `key=value`
/// overrides and the seed environment variable.
pub fn resolve(path: Option<&Path>, sets: &[String], env_seed: Option<String>) -> CliResult<RunConfig> {
    let base = match path {
        Some(p) => {
            require(p)?;
            let text = std::fs::read_to_string(p).map_err(|e| modaltune_core::Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            serde_json::from_str::<Value>(&text)?
        }
        None => serde_json::to_value(RunConfig::desk())?,
    };
    let mut value: Value = serde_json::to_value(serde_json::from_value::<RunConfig>(base)?)?;
    for s in sets {
        apply_set(&mut value, s)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(value)?;
    if let Some(seed) = env_seed {
        let seed: u64 = seed
            .trim()
            .parse()
            .map_err(|_| CliError::Schema(format!("{SEED_ENV} is not an integer: {seed}")))?;
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

/// `a.b.c=value`; the value is parsed as JSON, falling back to a string.
pub fn apply_set(root: &mut Value, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Schema(format!("--set expects key=value, got {assignment}")))?;
    let mut node = &mut *root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let slot = match node {
            Value::Object(map) => map.get_mut(*part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|k| items.get_mut(k)),
            _ => None,
        };
        let Some(slot) = slot else {
            return Err(CliError::Schema(format!("unknown config key {key}")));
        };
        if i + 1 == parts.len() {
            *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            return Ok(());
        }
        node = slot;
    }
    Err(CliError::Schema(format!("empty config key in {assignment}")))
}
