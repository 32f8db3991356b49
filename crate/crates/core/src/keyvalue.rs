//! `key = value` text shared by scenario and pipeline configuration files.
//!
//! One entry per line. `#` starts a comment anywhere outside a value's
//! content. Keys are ASCII letters, digits, `_`, `.` and `-`. Duplicate keys
//! are rejected. Lists are comma separated, optionally wrapped in `[ ]`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Parsed document, entries in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: Vec<Entry>,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty() && key.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'))
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<Entry> = Vec::new();
        let mut seen = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`")))?;
            let key = key.trim();
            let value = value.trim();
            if !valid_key(key) {
                return Err(Error::Config(format!("line {line}: invalid key {key:?}")));
            }
            if value.is_empty() {
                return Err(Error::Config(format!("line {line}: missing value for `{key}`")));
            }
            if let Some(first) = seen.insert(key.to_string(), line) {
                return Err(Error::Config(format!("line {line}: duplicate key `{key}` (first set on line {first})")));
            }
            entries.push(Entry {
                key: key.to_string(),
                value: value.to_string(),
                line,
            });
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends or replaces `key`.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|e| e.key == key) {
            Some(e) => e.value = value,
            None => {
                let line = self.entries.len() + 1;
                self.entries.push(Entry {
                    key: key.to_string(),
                    value,
                    line,
                })
            }
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(out, "{} = {}", e.key, e.value);
        }
        out
    }
}

impl Entry {
    fn error(&self, what: &str) -> Error {
        Error::Config(format!("line {}: `{}` expects {what}, got {:?}", self.line, self.key, self.value))
    }

    pub fn parse<T: FromStr>(&self, what: &str) -> Result<T> {
        self.value.parse().map_err(|_| self.error(what))
    }

    pub fn float(&self) -> Result<f64> {
        let v: f64 = self.parse("a number")?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.error("a finite number"))
        }
    }

    pub fn boolean(&self) -> Result<bool> {
        match self.value.to_ascii_lowercase().as_str() {
            "true" | "on" | "yes" | "1" => Ok(true),
            "false" | "off" | "no" | "0" => Ok(false),
            _ => Err(self.error("a boolean")),
        }
    }

    pub fn float_list(&self) -> Result<Vec<f64>> {
        let inner = self.value.trim();
        let inner = inner
            .strip_prefix('[')
            .and_then(|s| s.strip_suffix(']'))
            .unwrap_or(inner);
        inner
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| self.error("a comma-separated list of numbers"))
            })
            .collect()
    }
}

/// Formats a float list as `a, b, c`, using the shortest round-tripping form.
pub fn format_list(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(", ")
}
