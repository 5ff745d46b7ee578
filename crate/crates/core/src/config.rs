//! `key = value` configuration files.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored. Keys
//! may be repeated; the last occurrence wins, which is how command-line
//! overrides are layered on top of a file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, found `{text}`")]
    Syntax { line: usize, text: String },
    #[error("invalid value for `{key}`: `{value}` ({reason})")]
    Value {
        key: String,
        value: String,
        reason: String,
    },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
}

/// Parsed settings in key order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            }
            entries.insert(key.to_string(), value.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Parses `key` if present, leaving `slot` unchanged otherwise.
    pub fn read<V>(&self, key: &str, slot: &mut V) -> Result<(), ConfigError>
    where
        V: FromStr,
        V::Err: Display,
    {
        if let Some(value) = self.get(key) {
            *slot = value.parse().map_err(|e: V::Err| ConfigError::Value {
                key: key.to_string(),
                value: value.to_string(),
                reason: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Parses a comma-separated list.
    pub fn read_list<V>(&self, key: &str, slot: &mut Vec<V>) -> Result<(), ConfigError>
    where
        V: FromStr,
        V::Err: Display,
    {
        if let Some(value) = self.get(key) {
            *slot = value
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse().map_err(|e: V::Err| ConfigError::Value {
                        key: key.to_string(),
                        value: value.to_string(),
                        reason: e.to_string(),
                    })
                })
                .collect::<Result<_, _>>()?;
        }
        Ok(())
    }

    /// Fails on the first key not listed in `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<(), ConfigError> {
        match self.entries.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(ConfigError::UnknownKey(k.clone())),
            None => Ok(()),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Canonical `key = value` text, sorted by key.
    pub fn render(&self) -> String {
        self.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
