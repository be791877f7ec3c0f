//! Plain-text `key=value` configuration with dot-separated nested keys.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{cfg_err, Result};

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(cfg_err!("line {}: expected key=value, got {line:?}", n + 1));
        };
        let k = k.trim();
        if k.is_empty() {
            return Err(cfg_err!("line {}: empty key", n + 1));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// One `key=value` line per entry, in the given order.
pub fn render_kv(pairs: &[(String, String)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        s.push_str(k);
        s.push('=');
        s.push_str(v);
        s.push('\n');
    }
    s
}

/// Parses `value` for `key`, naming both on failure.
pub fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: Display,
{
    value
        .parse()
        .map_err(|e| cfg_err!("{key}: cannot parse {value:?}: {e}"))
}

/// Comma-separated list.
pub fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>>
where
    V::Err: Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

pub fn render_list<V: Display>(values: &[V]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Optional value; `none` (or empty) means absent.
pub fn parse_opt<V: FromStr>(key: &str, value: &str) -> Result<Option<V>>
where
    V::Err: Display,
{
    match value.trim() {
        "" | "none" => Ok(None),
        v => parse_value(key, v).map(Some),
    }
}

pub fn render_opt<V: Display>(value: &Option<V>) -> String {
    value.as_ref().map_or_else(|| "none".to_string(), ToString::to_string)
}

/// Configuration sections addressable by key.
pub trait KvConfig {
    /// Every field as `(key, value)` under `prefix`, in a fixed order.
    fn to_kv(&self, prefix: &str) -> Vec<(String, String)>;
    /// Sets the field named `key` (without the section prefix).
    fn set_kv(&mut self, key: &str, value: &str) -> Result<()>;
}

/// `prefix.key`, or `key` when the prefix is empty.
pub fn join_key(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}
