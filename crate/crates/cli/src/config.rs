//! Line-based `key=value` config files. Grammar: one `key=value` per line,
//! `#` starts a comment, blank lines ignored, keys use the long flag name
//! with `-` or `_` (both accepted). Precedence: CLI flag > file > default.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use dsm_core::{Error, Result};

#[derive(Default)]
pub struct FileConfig {
    map: HashMap<String, String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)?;
        let mut map = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Input(format!(
                    "config line {}: expected key=value, got `{line}`",
                    i + 1
                )));
            };
            map.insert(k.trim().replace('-', "_"), v.trim().to_string());
        }
        Ok(FileConfig { map })
    }

    /// flag > file > default.
    pub fn get<T: FromStr + Copy>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.map.get(&key.replace('-', "_")) {
            Some(raw) => raw.parse().map_err(|e| {
                Error::Input(format!("config key `{key}`: bad value `{raw}`: {e}"))
            }),
            None => Ok(default),
        }
    }
}
