//! Flag > config file > default resolution. The config file is flat TOML
//! whose keys are the long flag names (`cell-size = 20`), or a run manifest
//! (`.json`), whose resolved config replays the run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use serde_json::Value;

use crate::error::{CliError, Result};

#[derive(Debug, Default)]
pub struct Settings {
    pub path: Option<PathBuf>,
    file: BTreeMap<String, String>,
    used: BTreeSet<String>,
    /// Every value a command read, after resolution.
    pub resolved: BTreeMap<String, Value>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let bad = |e: &dyn Display| CliError::invalid(format!("{}: {e}", path.display()));
        let entries: Vec<(String, Value)> = if path.extension().is_some_and(|e| e == "json") {
            let manifest: Value = serde_json::from_str(&text).map_err(|e| bad(&e))?;
            match manifest.get("config") {
                Some(Value::Object(config)) => config.clone().into_iter().collect(),
                _ => return Err(bad(&"manifest has no config object")),
            }
        } else {
            let table: toml::Table = text.parse().map_err(|e| bad(&e))?;
            let table = serde_json::to_value(table).map_err(|e| bad(&e))?;
            table.as_object().map(|t| t.clone().into_iter().collect()).unwrap_or_default()
        };
        let mut file = BTreeMap::new();
        for (k, v) in entries {
            let s = match v {
                Value::Null => continue,
                Value::String(s) => s,
                Value::Number(n) => n.to_string(),
                Value::Bool(b) => b.to_string(),
                Value::Array(items) if items.iter().all(Value::is_string) => Value::Array(items).to_string(),
                _ => return Err(bad(&format!("key '{k}' must be a string, number, boolean or list of strings"))),
            };
            file.insert(k.replace('_', "-"), s);
        }
        Ok(Self { path: Some(path.to_path_buf()), file, ..Self::default() })
    }

    fn file_value<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.used.insert(key.to_string());
        self.file
            .get(key)
            .map(|raw| raw.parse::<T>().map_err(|e| CliError::invalid(format!("config key '{key}' = '{raw}': {e}"))))
            .transpose()
    }

    pub fn record<T: Serialize>(&mut self, key: &str, v: &T) {
        self.resolved.insert(key.to_string(), serde_json::to_value(v).unwrap_or(Value::Null));
    }

    /// Repeatable flag; the file holds a list of strings.
    pub fn list(&mut self, key: &str, flag: Vec<String>) -> Result<Vec<String>> {
        self.used.insert(key.to_string());
        let v = match self.file.get(key) {
            Some(raw) if flag.is_empty() => serde_json::from_str::<Vec<String>>(raw)
                .map_err(|_| CliError::invalid(format!("config key '{key}' must be a list of strings")))?,
            _ => flag,
        };
        self.record(key, &v);
        Ok(v)
    }

    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Serialize,
        T::Err: Display,
    {
        let file = self.file_value(key)?;
        let v = flag.or(file).unwrap_or(default);
        self.record(key, &v);
        Ok(v)
    }

    pub fn opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr + Serialize,
        T::Err: Display,
    {
        let file = self.file_value(key)?;
        let v = flag.or(file);
        self.record(key, &v);
        Ok(v)
    }

    pub fn require<T>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T: FromStr + Serialize,
        T::Err: Display,
    {
        self.opt(key, flag)?.ok_or_else(|| CliError::invalid(format!("--{key} is required")))
    }

    /// Keys present in the file that no setting read.
    pub fn unused(&self) -> Vec<String> {
        self.file.keys().filter(|k| !self.used.contains(*k)).cloned().collect()
    }
}
