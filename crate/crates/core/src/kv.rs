//! `key = value` text files used for manifests and sensor configs.
//!
//! Blank lines and `#` comments are ignored. Values may hold several
//! whitespace-separated numbers. Keys not consumed by the reader are
//! reported back so callers can warn instead of failing.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KvError {
    #[error("line {line}: expected `key = value`, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("line {line}: key `{key}`: cannot parse {value:?}: expected {expected}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
        expected: String,
    },
}

#[derive(Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
    used: std::cell::RefCell<BTreeSet<String>>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((k, v)) = content.split_once('=') else {
                return Err(KvError::Syntax {
                    line,
                    text: raw.to_string(),
                });
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(KvError::Syntax {
                    line,
                    text: raw.to_string(),
                });
            }
            if entries.insert(key.clone(), (line, v.trim().to_string())).is_some() {
                return Err(KvError::Duplicate { line, key });
            }
        }
        Ok(Self {
            entries,
            used: Default::default(),
        })
    }

    fn raw(&self, key: &str) -> Option<&(usize, String)> {
        let e = self.entries.get(key);
        if e.is_some() {
            self.used.borrow_mut().insert(key.to_string());
        }
        e
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, KvError> {
        match self.raw(key) {
            None => Ok(None),
            Some((line, v)) => v.parse::<T>().map(Some).map_err(|_| KvError::BadValue {
                line: *line,
                key: key.to_string(),
                value: v.clone(),
                expected: std::any::type_name::<T>().to_string(),
            }),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, KvError> {
        self.get(key)?.ok_or_else(|| KvError::Missing(key.to_string()))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, KvError> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Exactly `N` whitespace-separated floats.
    pub fn get_floats<const N: usize>(&self, key: &str) -> Result<Option<[f64; N]>, KvError> {
        let Some((line, v)) = self.raw(key) else {
            return Ok(None);
        };
        let bad = || KvError::BadValue {
            line: *line,
            key: key.to_string(),
            value: v.clone(),
            expected: format!("{N} numbers"),
        };
        let parts: Vec<f64> = v
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad())?;
        parts.try_into().map(Some).map_err(|_| bad())
    }

    /// Keys present in the file but never read.
    pub fn unused_keys(&self) -> Vec<String> {
        let used = self.used.borrow();
        self.entries
            .keys()
            .filter(|k| !used.contains(*k))
            .cloned()
            .collect()
    }
}
