//! Plain key/value config files: one `key = value` per line, `#` comments.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KvError {
    #[error("io error reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("key `{key}`: cannot parse `{value}` as {ty}")]
    BadValue {
        key: String,
        value: String,
        ty: &'static str,
    },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
}

/// Parsed key/value file with insertion-stable lookup by key.
#[derive(Debug, Clone, Default)]
pub struct KvFile {
    entries: BTreeMap<String, String>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<KvFile, KvError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(KvError::Malformed {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(KvFile { entries })
    }

    pub fn load(path: &Path) -> Result<KvFile, KvError> {
        KvFile::parse(&std::fs::read_to_string(path)?)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn f64(&self, key: &str) -> Result<Option<f64>, KvError> {
        self.typed(key, "f64", |v| v.parse::<f64>().ok())
    }

    pub fn usize(&self, key: &str) -> Result<Option<usize>, KvError> {
        self.typed(key, "usize", |v| v.parse::<usize>().ok())
    }

    pub fn u64(&self, key: &str) -> Result<Option<u64>, KvError> {
        self.typed(key, "u64", |v| v.parse::<u64>().ok())
    }

    pub fn string(&self, key: &str) -> Option<String> {
        self.entries.get(key).cloned()
    }

    /// Comma-separated list value.
    pub fn list(&self, key: &str) -> Option<Vec<String>> {
        self.entries.get(key).map(|v| {
            v.split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect()
        })
    }

    fn typed<T>(
        &self,
        key: &str,
        ty: &'static str,
        parse: impl Fn(&str) -> Option<T>,
    ) -> Result<Option<T>, KvError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => match parse(v) {
                Some(t) => Ok(Some(t)),
                None => Err(KvError::BadValue {
                    key: key.to_string(),
                    value: v.clone(),
                    ty,
                }),
            },
        }
    }
}
