//! Flat `key = value` configuration files and value resolution.
//!
//! Precedence, highest first: command-line flag, config-file entry,
//! built-in default. The seed additionally falls back to the `DSF_SEED`
//! environment variable before its built-in default.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

pub const SEED_ENV: &str = "DSF_SEED";
pub const DEFAULT_SEED: u64 = 0;

/// Every key a config file may contain.
pub const KNOWN_KEYS: &[&str] = &[
    "accel",
    "batch_size",
    "cascades",
    "center_fraction",
    "checkpoint",
    "checkpoint_dir",
    "cstv_iters",
    "data",
    "embed_dim",
    "epochs",
    "error_range",
    "lambda1",
    "lambda2",
    "lambda3",
    "lambda_tv",
    "log",
    "lr",
    "method",
    "mlp_hidden",
    "mode",
    "n",
    "n_blocks",
    "n_cascades",
    "n_heads",
    "n_layers",
    "out",
    "rho_max",
    "rho_min",
    "scale",
    "seed",
    "share_weights",
    "size",
    "slice",
    "slices_per_subject",
    "split",
    "target",
    "test_fraction",
    "use_cc",
    "use_kf",
    "val_fraction",
    "window_size",
];

#[derive(Debug, Default, Clone, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    /// Parse `key = value` lines. Blank lines and lines starting with `#`
    /// are ignored; keys may use `-` or `_`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value, got {line:?}", n + 1))?;
            let key = key.trim().replace('-', "_");
            if !KNOWN_KEYS.contains(&key.as_str()) {
                bail!("line {}: unknown key {key:?}", n + 1);
            }
            if values.insert(key.clone(), value.trim().to_string()).is_some() {
                bail!("line {}: duplicate key {key:?}", n + 1);
            }
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        ConfigFile::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|e| anyhow!("config key {key}: invalid value {v:?}: {e}")))
            .transpose()
    }

    /// Flag, then config entry, then `default`.
    pub fn resolve<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.resolve_opt(flag, key)?.unwrap_or(default))
    }

    /// Flag, then config entry.
    pub fn resolve_opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }

    /// Flag, then config entry, then `DSF_SEED`, then [`DEFAULT_SEED`].
    pub fn seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = self.resolve_opt(flag, "seed")? {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|e| anyhow!("{SEED_ENV}: invalid seed {v:?}: {e}")),
            Err(_) => Ok(DEFAULT_SEED),
        }
    }
}

/// Comma- or space-separated list.
pub fn parse_list<T: FromStr>(text: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    text.split([',', ' ', 'x'])
        .filter(|s| !s.is_empty())
        .map(|s| s.trim().parse::<T>().map_err(|e| anyhow!("invalid list item {s:?}: {e}")))
        .collect()
}
