//! Flat `key = value` configuration files.
//!
//! One entry per line, `#` starts a comment, keys are namespaced with dots
//! (`model.filters`, `train.epochs`, `aug.hflip_p`). List values are
//! comma-separated.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(Error::Config(format!("line {}: invalid key `{k}`", lineno + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", lineno + 1)));
            }
        }
        Ok(KvConfig { entries })
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn set_list<T: Display>(&mut self, key: impl Into<String>, values: &[T]) {
        let joined: Vec<String> = values.iter().map(ToString::to_string).collect();
        self.entries.insert(key.into(), joined.join(","));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| Error::Config(format!("`{key}`: cannot parse `{v}`: {e}"))))
            .transpose()
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(|item| {
                        item.trim()
                            .parse::<T>()
                            .map_err(|e| Error::Config(format!("`{key}`: cannot parse item `{item}`: {e}")))
                    })
                    .collect()
            })
            .transpose()
    }

    /// Fails on any key under `prefix` that is not in `known`.
    pub fn reject_unknown(&self, prefix: &str, known: &[&str]) -> Result<()> {
        for k in self.entries.keys().filter(|k| k.starts_with(prefix)) {
            if !known.contains(&&k[prefix.len()..]) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
        }
        Ok(())
    }

    /// Keys outside every namespace in `prefixes`.
    pub fn reject_foreign(&self, prefixes: &[&str]) -> Result<()> {
        for k in self.entries.keys() {
            if !prefixes.iter().any(|p| k.starts_with(p)) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Reads a fixed-size list entry into `target` when present.
pub(crate) fn read_array<T: FromStr + Copy, const N: usize>(kv: &KvConfig, key: &str, target: &mut [T; N]) -> Result<()>
where
    T::Err: Display,
{
    if let Some(v) = kv.list::<T>(key)? {
        *target = v
            .try_into()
            .map_err(|v: Vec<T>| Error::Config(format!("`{key}` needs {N} values, got {}", v.len())))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let kv = KvConfig::parse("# header\nmodel.filters = 8, 16,24 ,32  # trailing\n\ntrain.epochs=3\n").unwrap();
        assert_eq!(kv.list::<usize>("model.filters").unwrap(), Some(vec![8, 16, 24, 32]));
        assert_eq!(kv.parsed::<u32>("train.epochs").unwrap(), Some(3));
        assert_eq!(kv.parsed::<u32>("train.seed").unwrap(), None);
    }

    #[test]
    fn rejects_malformed_lines_and_duplicates() {
        assert!(KvConfig::parse("model.filters 8").is_err());
        assert!(KvConfig::parse("a = 1\na = 2").is_err());
        assert!(KvConfig::parse("bad key = 1").is_err());
    }

    #[test]
    fn text_roundtrip() {
        let mut kv = KvConfig::new();
        kv.set("train.lr_max", 0.001);
        kv.set_list("model.filters", &[1, 2, 3]);
        assert_eq!(KvConfig::parse(&kv.to_text()).unwrap(), kv);
    }
}
