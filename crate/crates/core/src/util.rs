//! Small text formats shared by the artifact writers.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub(crate) fn parse_key_values(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("expected key=value, got `{line}`"),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub(crate) fn require<'a>(kv: &'a BTreeMap<String, String>, key: &str, path: &Path) -> Result<&'a str> {
    kv.get(key).map(String::as_str).ok_or_else(|| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: format!("missing key `{key}`"),
    })
}

/// Reads a CSV with a header line whose first column is an identifier and
/// the remaining columns are numbers.
pub(crate) fn read_csv_rows(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let id = parts.next().unwrap_or_default().trim().to_string();
        let vals = parts
            .map(|t| {
                t.trim().parse::<f64>().map_err(|_| Error::MalformedHeader {
                    path: path.to_path_buf(),
                    reason: format!("line {}: bad number `{t}`", n + 1),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((id, vals));
    }
    Ok(rows)
}
