//! Flat `section.key = value` text configs.
//!
//! One entry per line; `#` starts a comment; blank lines are ignored. Keys
//! are unique. Values are raw strings, parsed by their consumer.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KvError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: cannot parse {value:?}: {msg}")]
    Value { key: String, value: String, msg: String },
}

/// Ordered key/value entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

fn valid_key(k: &str) -> bool {
    !k.is_empty() && k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-')
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| KvError::Syntax { line: i + 1, text: raw.to_string() })?;
            let (k, v) = (k.trim(), v.trim());
            if !valid_key(k) {
                return Err(KvError::Syntax { line: i + 1, text: raw.to_string() });
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(KvError::Duplicate { line: i + 1, key: k.to_string() });
            }
        }
        Ok(Self { entries })
    }

    /// Parses one `key=value` override.
    pub fn parse_override(s: &str) -> Result<(String, String), KvError> {
        let (k, v) = s.split_once('=').ok_or_else(|| KvError::Syntax { line: 0, text: s.to_string() })?;
        let k = k.trim();
        if !valid_key(k) {
            return Err(KvError::Syntax { line: 0, text: s.to_string() });
        }
        Ok((k.to_string(), v.trim().to_string()))
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Fails on the first key outside `allowed`.
    pub fn reject_unknown<'a>(&self, allowed: impl IntoIterator<Item = &'a str>) -> Result<(), KvError> {
        let allowed: Vec<&str> = allowed.into_iter().collect();
        match self.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(KvError::UnknownKey(k.to_string())),
            None => Ok(()),
        }
    }

    /// Parsed value of `key`, or `default` when absent.
    pub fn value<T: FromStr>(&self, key: &str, default: T) -> Result<T, KvError>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e: T::Err| KvError::Value { key: key.to_string(), value: v.to_string(), msg: e.to_string() }),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_values() {
        let c = KvConfig::parse("# header\ntrain.lr = 0.001 # note\n\ngen.seed=7\n").unwrap();
        assert_eq!(c.value("train.lr", 0.0f64).unwrap(), 0.001);
        assert_eq!(c.value("gen.seed", 0u64).unwrap(), 7);
        assert_eq!(c.value("gen.scenes", 5usize).unwrap(), 5);
        assert_eq!(KvConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_malformed_duplicate_and_unknown() {
        assert!(matches!(KvConfig::parse("a.b 3"), Err(KvError::Syntax { line: 1, .. })));
        assert!(matches!(KvConfig::parse("a = 1\na = 2"), Err(KvError::Duplicate { line: 2, .. })));
        let c = KvConfig::parse("a.b = 1\nc.d = 2").unwrap();
        assert_eq!(c.reject_unknown(["a.b"]), Err(KvError::UnknownKey("c.d".into())));
        assert!(matches!(c.value::<u32>("a.b", 0).map(|_| ()).and(c.value::<bool>("c.d", false).map(|_| ())), Err(KvError::Value { .. })));
    }

    #[test]
    fn overrides_split_on_first_equals() {
        assert_eq!(KvConfig::parse_override("x.y=a=b").unwrap(), ("x.y".into(), "a=b".into()));
        assert!(KvConfig::parse_override("novalue").is_err());
    }
}
