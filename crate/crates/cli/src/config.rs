//! Config loading, `--set` overrides, and run manifests.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::CliError;

/// Parses `KEY=VALUE`. The value is read as JSON when it parses, else as a string.
pub fn parse_override(raw: &str) -> Result<(String, Value), String> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| format!("`{raw}` is not KEY=VALUE"))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(format!("`{key}` is not a valid key"));
    }
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.to_string(), value))
}

/// Sets a dotted path, creating intermediate objects.
pub fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("`{key}`: `{}` is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("keys have at least one part")
}

pub fn get_path<'a>(root: &'a Value, key: &str) -> Option<&'a Value> {
    key.split('.').try_fold(root, |node, part| node.get(part))
}

/// Reads a config file; a manifest written by this tool is accepted in its place.
pub fn load(path: Option<&Path>, default: Value) -> Result<Value, CliError> {
    let Some(path) = path else {
        return Ok(default);
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if value.get("tool").and_then(Value::as_str) == Some(TOOL) {
        return value
            .get("config")
            .cloned()
            .ok_or_else(|| CliError::Config(format!("{}: manifest has no config", path.display())));
    }
    Ok(value)
}

/// Applies overrides in order. Setting `s0` without `s0_mode` at the same level also
/// switches that level's anchor mode to `explicit`.
pub fn apply_overrides(root: &mut Value, overrides: &[(String, Value)]) -> Result<(), CliError> {
    for (key, value) in overrides {
        set_path(root, key, value.clone())?;
    }
    for (key, _) in overrides {
        if let Some(prefix) = key.strip_suffix("s0").filter(|p| p.is_empty() || p.ends_with('.')) {
            let mode_key = format!("{prefix}s0_mode");
            if !overrides.iter().any(|(k, _)| *k == mode_key) {
                set_path(root, &mode_key, Value::String("explicit".into()))?;
            }
        }
    }
    Ok(())
}

pub fn decode<T: DeserializeOwned>(value: &Value) -> Result<T, CliError> {
    serde_json::from_value(value.clone()).map_err(|e| CliError::Config(format!("config: {e}")))
}

pub fn encode<T: Serialize>(config: &T) -> Value {
    serde_json::to_value(config).expect("configs serialize to JSON")
}

pub const TOOL: &str = "dcp";

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'a str,
    pub overrides: Vec<String>,
    pub jobs: Option<usize>,
    /// Fully resolved config; pass this file back as `--config` to rerun.
    pub config: Value,
}

impl<'a> Manifest<'a> {
    pub fn new(subcommand: &'a str, overrides: &[(String, Value)], jobs: Option<usize>, config: Value) -> Self {
        Self {
            tool: TOOL,
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            overrides: overrides.iter().map(|(k, v)| format!("{k}={v}")).collect(),
            jobs,
            config,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn override_values_parse_as_json_or_string() {
        assert_eq!(parse_override("epsilon0=1e-4").unwrap(), ("epsilon0".into(), json!(1e-4)));
        assert_eq!(parse_override("topology=torus").unwrap(), ("topology".into(), json!("torus")));
        assert_eq!(parse_override("a.b=[1,2]").unwrap(), ("a.b".into(), json!([1, 2])));
        assert_eq!(parse_override("x==").unwrap(), ("x".into(), json!("=")));
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("a..b=1").is_err());
    }

    #[test]
    fn overrides_are_last_wins_and_nest() {
        let mut v = json!({"qdcp": {"T": 10}});
        let o = vec![
            parse_override("qdcp.T=20").unwrap(),
            parse_override("qdcp.T=30").unwrap(),
            parse_override("new.deep.key=true").unwrap(),
        ];
        apply_overrides(&mut v, &o).unwrap();
        assert_eq!(v, json!({"qdcp": {"T": 30}, "new": {"deep": {"key": true}}}));
        assert!(set_path(&mut v, "qdcp.T.x", json!(1)).is_err());
    }

    #[test]
    fn anchor_override_switches_mode() {
        let mut v = json!({"s0_mode": "avg_local_quantile"});
        apply_overrides(&mut v, &[parse_override("s0=-10").unwrap()]).unwrap();
        assert_eq!(v["s0_mode"], "explicit");

        let mut v = json!({});
        let o = [parse_override("qdcp.s0=0.5").unwrap(), parse_override("qdcp.s0_mode=avg_local_quantile").unwrap()];
        apply_overrides(&mut v, &o).unwrap();
        assert_eq!(v["qdcp"]["s0_mode"], "avg_local_quantile");

        let mut v = json!({});
        apply_overrides(&mut v, &[parse_override("bias0=1").unwrap()]).unwrap();
        assert_eq!(v, json!({"bias0": 1}));
    }
}
