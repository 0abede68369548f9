//! `--set key.path=value` overrides applied to a JSON config before it is
//! deserialized.

use mocorr_core::{Error, Result};
use serde_json::Value;

/// Applies one `a.b.c=value` assignment. `value` is parsed as JSON when it
/// can be, otherwise taken as a string. Only existing keys may be set.
pub fn apply(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config("set", format!("expected key=value, got {assignment:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(path, format!("{:?} is not an object", keys[..i].join("."))))?;
        let slot = obj
            .get_mut(*key)
            .ok_or_else(|| Error::config(path, format!("unknown key {key:?}")))?;
        if i + 1 == keys.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Err(Error::config("set", "empty key"))
}

pub fn apply_all(root: &mut Value, assignments: &[String]) -> Result<()> {
    assignments.iter().try_for_each(|a| apply(root, a))
}
