//! `key = value` text used for configs and checkpoint metadata.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{EalmError, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Blank lines and `#` comments are skipped; later keys override earlier.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| EalmError::config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(EalmError::config(format!("line {}: empty key", n + 1)));
            }
            entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(KvMap { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EalmError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn from_map(entries: BTreeMap<String, String>) -> Self {
        KvMap { entries }
    }

    pub fn into_map(self) -> BTreeMap<String, String> {
        self.entries
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .raw(key)
            .ok_or_else(|| EalmError::config(format!("missing key {key:?}")))?;
        raw.parse()
            .map_err(|_| EalmError::config(format!("{key} = {raw:?} does not parse")))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        if self.contains(key) {
            self.get(key)
        } else {
            Ok(default)
        }
    }

    /// Entries under `prefix.`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> KvMap {
        let p = format!("{prefix}.");
        KvMap {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn merge_prefixed(&mut self, prefix: &str, other: &KvMap) {
        for (k, v) in &other.entries {
            self.entries.insert(format!("{prefix}.{k}"), v.clone());
        }
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_sections() {
        let kv = KvMap::parse("# c\n a = 1\n\npre.x = 2.5\npre.y=hi\n").unwrap();
        assert_eq!(kv.get::<usize>("a").unwrap(), 1);
        let s = kv.section("pre");
        assert_eq!(s.get::<f64>("x").unwrap(), 2.5);
        assert_eq!(s.raw("y"), Some("hi"));
        assert_eq!(kv.get_or("missing", 7u32).unwrap(), 7);
        assert_eq!(KvMap::parse(&kv.to_text()).unwrap(), kv);
    }

    #[test]
    fn bad_lines_are_config_errors() {
        assert_eq!(KvMap::parse("novalue").unwrap_err().class(), "ConfigError");
        let kv = KvMap::parse("n = abc").unwrap();
        assert_eq!(kv.get::<usize>("n").unwrap_err().class(), "ConfigError");
    }
}
