//! Config documents: file, then `--seed`, then `--set` overrides.

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Sets the dotted `key` to `value`, creating objects on the way. The
/// value is parsed as JSON when possible and kept as a string otherwise,
/// so `--set out=runs/a` and `--set steps=10` both work.
pub fn apply_override(doc: &mut Value, key: &str, value: &str) -> Result<()> {
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::InvalidConfig(format!("malformed override key `{key}`")));
    }
    let parsed = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            return Err(Error::InvalidConfig(format!(
                "override `{key}`: `{}` is not an object",
                parts[..i].join(".")
            )));
        }
        let obj = cur.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("key has at least one part")
}

/// Merges overrides into `base` (an empty object when absent) and
/// deserializes the result. Unknown keys are rejected by the target type.
pub fn resolve_config<T: DeserializeOwned>(base: Option<Value>, seed: Option<u64>, sets: &[(String, String)]) -> Result<T> {
    let mut doc = base.unwrap_or_else(|| Value::Object(Map::new()));
    if !doc.is_object() {
        return Err(Error::InvalidConfig("config must be a JSON object".into()));
    }
    if let Some(s) = seed {
        doc["seed"] = Value::from(s);
    }
    for (k, v) in sets {
        apply_override(&mut doc, k, v)?;
    }
    serde_json::from_value(doc).map_err(|e| Error::InvalidConfig(e.to_string()))
}
