//! Flat key-path configuration files: `key = value` lines, `#` comments,
//! typed reads, and hard rejection of keys no command consumed.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};

use crate::common::config_error;

/// Parsed config: a flat map from dotted key paths to raw string values.
/// Commands `take` the keys they understand; `finish` rejects leftovers.
pub struct Config {
    values: BTreeMap<String, String>,
    source: String,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        Config::parse(&text, &path.display().to_string())
    }

    /// An empty config, for commands invoked without `--config`.
    pub fn empty() -> Config {
        Config { values: BTreeMap::new(), source: "<none>".into() }
    }

    pub fn parse(text: &str, source: &str) -> Result<Config> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(config_error(format!(
                    "{source}:{}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() || value.is_empty() {
                return Err(config_error(format!("{source}:{}: empty key or value", lineno + 1)));
            }
            if values.insert(key.clone(), value).is_some() {
                return Err(config_error(format!(
                    "{source}:{}: duplicate key `{key}`",
                    lineno + 1
                )));
            }
        }
        Ok(Config { values, source: source.to_string() })
    }

    /// Remove and return a raw value.
    pub fn take(&mut self, key: &str) -> Option<String> {
        self.values.remove(key)
    }

    pub fn take_parsed<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.values.remove(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| config_error(format!("{}: key `{key}`: cannot parse `{v}`", self.source))),
        }
    }

    /// Reject any key no command consumed, naming the key paths.
    pub fn finish(self) -> Result<()> {
        if self.values.is_empty() {
            return Ok(());
        }
        let keys: Vec<&str> = self.values.keys().map(|s| s.as_str()).collect();
        Err(config_error(format!("{}: unknown config key(s): {}", self.source, keys.join(", "))))
    }
}
