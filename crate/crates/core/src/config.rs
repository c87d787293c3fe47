//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique;
//! every consumer pulls the keys it knows and [`KeyValues::finish`] rejects
//! whatever is left over.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key `{key}`")));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Remove and parse `key`, keeping `current` when absent.
    pub fn take<T: FromStr>(&mut self, key: &str, current: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(raw) = self.entries.remove(key) {
            *current = raw
                .parse()
                .map_err(|e| Error::Config(format!("key `{key}`: cannot parse `{raw}`: {e}")))?;
        }
        Ok(())
    }

    /// Comma-separated list variant of [`KeyValues::take`].
    pub fn take_list<T: FromStr>(&mut self, key: &str, current: &mut Vec<T>) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(raw) = self.entries.remove(key) {
            *current = raw
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse().map_err(|e| {
                        Error::Config(format!("key `{key}`: cannot parse `{s}`: {e}"))
                    })
                })
                .collect::<Result<_>>()?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            None => Ok(()),
            Some(k) => Err(Error::Config(format!("unknown key `{k}`"))),
        }
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn merge(&mut self, other: KeyValues) {
        self.entries.extend(other.entries);
    }
}

pub(crate) fn join<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}
