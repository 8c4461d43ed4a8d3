//! Flag > config file > default resolution.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

/// Keys read from a JSON config file. Unknown keys are rejected so typos do
/// not silently fall back to defaults.
pub struct Config {
    values: Map<String, Value>,
}

impl Config {
    pub fn load(path: Option<&Path>, allowed: &[&str]) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self { values: Map::new() });
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let values = match serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))? {
            Value::Object(m) => m,
            _ => bail!(armo_core::Error::InvalidArgument(format!(
                "config {} must be a JSON object",
                path.display()
            ))),
        };
        if let Some(k) = values.keys().find(|k| !allowed.contains(&k.as_str())) {
            bail!(armo_core::Error::InvalidArgument(format!(
                "unknown config key {k:?}; expected one of {allowed:?}"
            )));
        }
        Ok(Self { values })
    }

    pub fn pick<T: DeserializeOwned>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| {
                armo_core::Error::InvalidArgument(format!("config key {key:?}: {e}")).into()
            }),
            None => Ok(default),
        }
    }

    pub fn pick_opt<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        self.values
            .get(key)
            .map(|v| {
                serde_json::from_value(v.clone())
                    .map_err(|e| armo_core::Error::InvalidArgument(format!("config key {key:?}: {e}")).into())
            })
            .transpose()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
