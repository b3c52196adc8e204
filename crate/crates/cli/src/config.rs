//! Flat `key = value` config files and flag/file/default resolution.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};

fn normalise(key: &str) -> String {
    key.trim().replace('-', "_")
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("config line {}: expected `key = value`, got `{raw}`", i + 1);
        };
        let key = normalise(key);
        if key.is_empty() {
            bail!("config line {}: empty key", i + 1);
        }
        if out.insert(key.clone(), value.trim().to_string()).is_some() {
            bail!("config line {}: duplicate key `{key}`", i + 1);
        }
    }
    Ok(out)
}

/// Resolves each setting as flag, else config file, else default, and
/// remembers what was resolved for the manifest.
#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    used: BTreeSet<String>,
    resolved: BTreeMap<String, serde_json::Value>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            None => BTreeMap::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config file {}", p.display()))?;
                parse(&text).with_context(|| format!("in config file {}", p.display()))?
            }
        };
        Ok(Self { file, ..Self::default() })
    }

    fn file_value<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let key = normalise(key);
        let Some(raw) = self.file.get(&key) else {
            return Ok(None);
        };
        self.used.insert(key.clone());
        raw.parse()
            .map(Some)
            .map_err(|e| anyhow::anyhow!("config key `{key}`: {e}"))
    }

    fn record<T: serde::Serialize>(&mut self, key: &str, value: &T) {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.resolved.insert(normalise(key), v);
    }

    pub fn optional<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr + serde::Serialize,
        T::Err: Display,
    {
        let file = self.file_value(key)?;
        let value = flag.or(file);
        self.record(key, &value);
        Ok(value)
    }

    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + serde::Serialize,
        T::Err: Display,
    {
        let value = self.optional(key, flag)?.unwrap_or(default);
        self.record(key, &value);
        Ok(value)
    }

    /// A positional or otherwise mandatory value, recorded as given.
    pub fn fixed<T: serde::Serialize>(&mut self, key: &str, value: T) -> T {
        self.record(key, &value);
        value
    }

    /// Fails on config-file keys that no setting consumed.
    pub fn finish(&self) -> Result<()> {
        let unknown: Vec<&str> = self
            .file
            .keys()
            .filter(|k| !self.used.contains(*k))
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            bail!("unknown config key(s): {}", unknown.join(", "));
        }
        Ok(())
    }

    pub fn resolved(&self) -> &BTreeMap<String, serde_json::Value> {
        &self.resolved
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_dashes() {
        let map = parse("# header\nrank = 4  # trailing\n\nlearning-rate=0.1\n").unwrap();
        assert_eq!(map["rank"], "4");
        assert_eq!(map["learning_rate"], "0.1");
        assert!(parse("no equals sign").is_err());
        assert!(parse("a=1\na=2").is_err());
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let mut s = Settings {
            file: parse("rank=4\nseed=9").unwrap(),
            ..Settings::default()
        };
        assert_eq!(s.get("rank", Some(2usize), 8).unwrap(), 2);
        assert_eq!(s.get("seed", None, 0u64).unwrap(), 9);
        assert_eq!(s.get("steps", None, 100usize).unwrap(), 100);
        s.finish().unwrap();
        assert_eq!(s.resolved()["rank"], serde_json::json!(2));
    }

    #[test]
    fn unknown_and_malformed_keys_fail() {
        let mut s = Settings {
            file: parse("rank=four\nbogus=1").unwrap(),
            ..Settings::default()
        };
        assert!(s.get::<usize>("rank", None, 8).is_err());
        assert!(s.finish().is_err());
    }
}
