//! Flat `key = value` text files.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("line {line}: {msg}")]
pub struct KvError {
    pub line: usize,
    pub msg: String,
}

/// Parses `key = value` lines. `#` starts a comment line; later keys win.
pub fn parse(text: &str) -> Result<BTreeMap<String, String>, KvError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| KvError { line: i + 1, msg: format!("expected key = value, got {line:?}") })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(KvError { line: i + 1, msg: "empty key".into() });
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}
