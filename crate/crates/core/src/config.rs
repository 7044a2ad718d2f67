//! Plain-text `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Keys are unique; the canonical
//! rendering (sorted `key=value` lines) is what output headers hash.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_named(text, Path::new("<config>"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingInput(path.display().to_string()),
            _ => Error::io(path, e),
        })?;
        Self::parse_named(&text, path)
    }

    fn parse_named(text: &str, path: &Path) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i as u64 + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got '{line}'")))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(err("empty key".into()));
            }
            if map.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(err(format!("duplicate key '{k}'")));
            }
        }
        Ok(Self { map })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| {
                Error::Validation(format!("config key '{key}': cannot parse '{v}'"))
            }),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    /// Fails on keys outside `known` (exact names or `prefix.` families).
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        for k in self.map.keys() {
            let ok = known.iter().any(|p| match p.strip_suffix('*') {
                Some(prefix) => k.starts_with(prefix),
                None => k == p,
            });
            if !ok {
                return Err(Error::Validation(format!("unknown config key '{k}'")));
            }
        }
        Ok(())
    }

    /// Sorted `key=value` lines.
    pub fn render(&self) -> String {
        self.map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn merged(&self, other: &KeyValues) -> KeyValues {
        let mut map = self.map.clone();
        map.extend(other.map.iter().map(|(k, v)| (k.clone(), v.clone())));
        KeyValues { map }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_types() {
        let kv = KeyValues::parse("# dgp\nn_persons = 500\n\nhazard.3=0.02 # note\nname=x").unwrap();
        assert_eq!(kv.get::<usize>("n_persons").unwrap(), Some(500));
        assert_eq!(kv.get::<f64>("hazard.3").unwrap(), Some(0.02));
        assert!(kv.get::<u32>("name").is_err());
        assert_eq!(kv.get_or("missing", 7).unwrap(), 7);
        assert_eq!(kv.render(), "hazard.3=0.02\nn_persons=500\nname=x\n");
        assert!(kv.reject_unknown(&["n_persons", "hazard.*"]).is_err());
        assert!(kv.reject_unknown(&["n_persons", "hazard.*", "name"]).is_ok());
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(matches!(KeyValues::parse("a=1\nnonsense"), Err(Error::Parse { line: 2, .. })));
        assert!(KeyValues::parse("a=1\na=2").is_err());
    }
}
