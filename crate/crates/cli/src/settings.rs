//! Layered option resolution: built-in defaults, then a `key = value`
//! config file, then `TSXPLAIN_<KEY>` environment variables, then flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{CliError, Result};

pub const ENV_PREFIX: &str = "TSXPLAIN_";

/// Parses a config file: one `key = value` per line, `#` starts a comment,
/// blank lines are skipped, keys are case-insensitive and `-` equals `_`.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`, got {raw:?}", i + 1)))?;
        let key = normalize_key(k);
        if key.is_empty() {
            return Err(CliError::Usage(format!("config line {}: empty key", i + 1)));
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(CliError::Usage(format!("config line {}: duplicate key {key:?}", i + 1)));
        }
    }
    Ok(out)
}

pub fn normalize_key(k: &str) -> String {
    k.trim().to_lowercase().replace('-', "_")
}

#[derive(Debug, Clone, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    env: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl Settings {
    /// Reads the optional config file and the process environment.
    pub fn load(config: Option<&Path>) -> Result<Self> {
        let text = match config {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?),
            None => None,
        };
        Self::from_parts(text.as_deref(), std::env::vars())
    }

    pub fn from_parts(file: Option<&str>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let file = match file {
            Some(t) => parse_config(t)?,
            None => BTreeMap::new(),
        };
        let env = env
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|s| (normalize_key(s), v)))
            .collect();
        Ok(Settings {
            file,
            env,
            resolved: BTreeMap::new(),
        })
    }

    fn layered(&self, key: &str) -> Option<(&str, &'static str)> {
        if let Some(v) = self.env.get(key) {
            return Some((v, "environment"));
        }
        self.file.get(key).map(|v| (v.as_str(), "config file"))
    }

    /// The flag if given, else the environment, else the file, else none.
    pub fn get_opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => Some(v),
            None => match self.layered(key) {
                Some((raw, origin)) => Some(
                    raw.parse::<T>()
                        .map_err(|e| CliError::Usage(format!("{key} = {raw:?} from {origin}: {e}")))?,
                ),
                None => None,
            },
        };
        if let Some(v) = &v {
            self.resolved.insert(key.to_string(), v.to_string());
        }
        Ok(v)
    }

    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        match self.get_opt(key, flag)? {
            Some(v) => Ok(v),
            None => {
                self.resolved.insert(key.to_string(), default.to_string());
                Ok(default)
            }
        }
    }

    pub fn require<T>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.get_opt(key, flag)?.ok_or_else(|| {
            CliError::Usage(format!(
                "missing --{} (or `{key}` in the config file, or {ENV_PREFIX}{})",
                key.replace('_', "-"),
                key.to_uppercase()
            ))
        })
    }

    /// Fails on config-file keys that no option consumed.
    pub fn reject_unknown(&self) -> Result<()> {
        let unknown: Vec<&String> = self.file.keys().filter(|k| !self.resolved.contains_key(*k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::Usage(format!("unknown config keys: {unknown:?}")))
        }
    }

    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }
}
