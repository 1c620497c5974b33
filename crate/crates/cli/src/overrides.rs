//! JSON config documents with `--set dotted.key=value` overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::CliError;

/// Applies one `key=value` override. The value is parsed as JSON when
/// possible and taken as a plain string otherwise. Missing intermediate
/// objects are created; the typed schema rejects keys that do not belong.
pub fn apply(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("override key `{key}` is malformed")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            return Err(CliError::Config(format!(
                "override `{key}`: `{}` is not an object",
                parts[..i].join(".")
            )));
        }
        let obj = node.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("key has at least one part")
}

pub fn read_document(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Reads `path` (or starts from `{}`), applies overrides and an optional
/// top-level seed, then deserializes against the strict schema.
pub fn load<T: DeserializeOwned>(
    path: Option<&Path>,
    sets: &[String],
    seed: Option<(&str, u64)>,
) -> Result<T, CliError> {
    let mut doc = match path {
        Some(p) => read_document(p)?,
        None => Value::Object(Map::new()),
    };
    for s in sets {
        apply(&mut doc, s)?;
    }
    if let Some((key, seed)) = seed {
        apply(&mut doc, &format!("{key}={seed}"))?;
    }
    let origin = path.map(|p| p.display().to_string()).unwrap_or_else(|| "config".into());
    serde_json::from_value(doc).map_err(|e| CliError::Config(format!("{origin}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn nested_overrides() {
        let mut doc = json!({"trainer": {"batch_size": 8}, "model": {"preset": "cnn-small"}});
        apply(&mut doc, "trainer.batch_size=32").unwrap();
        apply(&mut doc, "controller.beta_end=0.25").unwrap();
        apply(&mut doc, "search_space=FLIQS-L-int").unwrap();
        apply(&mut doc, "cost_target={\"uniform\":\"INT8\"}").unwrap();
        assert_eq!(doc["trainer"]["batch_size"], 32);
        assert_eq!(doc["controller"]["beta_end"], 0.25);
        assert_eq!(doc["search_space"], "FLIQS-L-int");
        assert_eq!(doc["cost_target"]["uniform"], "INT8");
    }

    #[test]
    fn malformed_overrides() {
        let mut doc = json!({"seed": 1});
        assert!(apply(&mut doc, "seed").is_err());
        assert!(apply(&mut doc, "a..b=1").is_err());
        assert!(apply(&mut doc, "seed.x=1").is_err());
    }
}
