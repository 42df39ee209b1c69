//! Resolving a [`RunConfig`] from a preset, an optional TOML file and
//! `key.path=value` overrides.

use std::path::Path;

use toml::{Table, Value};
use trigen_core::config::RunConfig;
use trigen_core::{Error, Result};

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_owned()))
}

/// Applies `a.b.c=value`; numeric segments index into arrays.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        node = match node {
            Value::Table(t) => t
                .get_mut(*key)
                .ok_or_else(|| Error::config(format!("unknown configuration key {path:?}")))?,
            Value::Array(a) => {
                let idx: usize = key
                    .parse()
                    .map_err(|_| Error::config(format!("{path:?}: {key:?} is not an array index")))?;
                let len = a.len();
                a.get_mut(idx)
                    .ok_or_else(|| Error::config(format!("{path:?}: index {idx} out of range for {len} entries")))?
            }
            _ => return Err(Error::config(format!("{path:?}: {key:?} does not name a section"))),
        };
        if last {
            *node = parse_value(raw.trim());
        }
    }
    Ok(())
}

/// Preset, then file, then overrides; the result is validated.
pub fn resolve(preset: &str, file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let base = RunConfig::preset(preset)?;
    let mut value = Value::try_from(&base).map_err(|e| Error::config(format!("cannot encode configuration: {e}")))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: Table = text
            .parse()
            .map_err(|e| Error::config(format!("{}: invalid TOML: {e}", path.display())))?;
        merge(&mut value, Value::Table(table));
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let config: RunConfig = value.try_into().map_err(|e| Error::config(format!("invalid configuration: {e}")))?;
    config.validate()?;
    Ok(config)
}

pub fn to_toml(config: &RunConfig) -> Result<String> {
    toml::to_string_pretty(config).map_err(|e| Error::config(format!("cannot encode configuration: {e}")))
}
