//! `key = value` run files. Every key mirrors a long flag with dashes
//! replaced by underscores; flags given on the command line win.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use anyhow::{bail, Context, Result};

pub const KEYS: &[&str] = &[
    "seed",
    "threads",
    "out_dir",
    "limit_scale",
    "line",
    "tau",
    "simulate",
    "dt",
    "max_time",
    "runs",
    "t_max",
    "catalog",
    "cascade_bandwidth",
    "generation_bandwidth",
    "g_min",
    "g_max",
    "censored",
    "n_seeds",
];

/// Keys that never change results and stay out of the manifest id.
pub const NON_SEMANTIC: &[&str] = &["threads", "out_dir", "catalog"];

pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("config line {}: expected key = value", i + 1);
        };
        let key = k.trim().replace('-', "_");
        if !KEYS.contains(&key.as_str()) {
            bail!("config line {}: unknown key `{key}`", i + 1);
        }
        let value = v.trim().trim_matches('"').to_string();
        out.insert(key, value);
    }
    Ok(out)
}

/// Resolves settings from flags, then the config file, then defaults, and
/// records what was used.
#[derive(Debug, Default)]
pub struct Resolver {
    file: BTreeMap<String, String>,
    pub used: BTreeMap<String, String>,
}

impl Resolver {
    pub fn new(file: BTreeMap<String, String>) -> Self {
        Resolver {
            file,
            used: BTreeMap::new(),
        }
    }

    fn from_file<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.file.get(key) {
            None => Ok(None),
            Some(s) => s
                .parse::<T>()
                .map(Some)
                .map_err(|e| anyhow::anyhow!("config key `{key}`: {e}")),
        }
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => v,
            None => self.from_file(key)?.unwrap_or(default),
        };
        self.used.insert(key.into(), v.to_string());
        Ok(v)
    }

    pub fn get_opt<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => Some(v),
            None => self.from_file(key)?,
        };
        if let Some(v) = &v {
            self.used.insert(key.into(), v.to_string());
        }
        Ok(v)
    }

    /// Comma-separated list; an empty flag list defers to the file.
    pub fn get_list<T: FromStr + Display>(&mut self, key: &str, flag: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        let v = if !flag.is_empty() {
            flag
        } else if let Some(s) = self.file.get(key) {
            s.split(',')
                .map(|p| p.trim().parse::<T>().map_err(|e| anyhow::anyhow!("config key `{key}`: {e}")))
                .collect::<Result<Vec<T>>>()?
        } else {
            Vec::new()
        };
        if !v.is_empty() {
            let joined = v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
            self.used.insert(key.into(), joined);
        }
        Ok(v)
    }

    pub fn file_value(&self, key: &str) -> Option<&str> {
        self.file.get(key).map(String::as_str)
    }
}

pub fn read_config(path: &std::path::Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse_config(&text)
}
