//! Flat `key=value` configuration files.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Parses `key=value` lines. Blank lines and lines starting with `#` are
/// ignored; keys and values are trimmed; later keys override earlier ones.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Data {
            line: i + 1,
            message: format!("expected key=value, got '{line}'"),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Data {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}
