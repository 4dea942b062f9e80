//! Optional key=value config files. Precedence: command-line flag >
//! config file entry > built-in default.

use std::collections::HashMap;
use std::path::Path;

use anyhow::{bail, Context, Result};

pub struct FileConfig {
    values: HashMap<String, String>,
}

impl FileConfig {
    pub fn empty() -> Self {
        FileConfig { values: HashMap::new() }
    }

    /// Lines of `key = value`; blank lines and '#' comments allowed.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut values = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("{}:{}: expected key=value, got '{}'", path.display(), lineno + 1, line);
            };
            values.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(FileConfig { values })
    }

    /// Flag value if given, else the parsed config entry, else the default.
    pub fn resolve<T: std::str::FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|e| anyhow::anyhow!("config key '{}': bad value '{}': {}", key, raw, e)),
            None => Ok(default),
        }
    }
}
