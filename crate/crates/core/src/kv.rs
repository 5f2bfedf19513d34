//! Flat `key = value` text files used for configs, sequence specs and manifests.
//!
//! Blank lines and lines starting with `#` are skipped. Keys are unique.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvFile {
    entries: BTreeMap<String, String>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::config(
                    format!("line {}", n + 1),
                    format!("expected `key = value`, got `{line}`"),
                ));
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::config(format!("line {}", n + 1), "empty key"));
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::config(key, "duplicate key"));
            }
        }
        Ok(Self { entries })
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Typed lookup; `default` when absent, a field-naming error when malformed.
    pub fn get<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|e| Error::config(key, format!("cannot parse `{raw}`: {e}"))),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.entries.get(key).map(String::as_str) {
            None => Ok(default),
            Some("true" | "1" | "yes" | "on") => Ok(true),
            Some("false" | "0" | "no" | "off") => Ok(false),
            Some(other) => Err(Error::config(key, format!("expected a boolean, got `{other}`"))),
        }
    }

    /// Fails on the first key outside `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.entries.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Error::config(k.clone(), "unknown key")),
            None => Ok(()),
        }
    }
}

/// Writes `(key, value)` pairs one per line, in the given order.
pub fn render<K: Display, V: Display>(pairs: impl IntoIterator<Item = (K, V)>) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}
