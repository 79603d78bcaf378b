//! Service configuration: JSON file, then environment, then flags.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const WORKERS_ENV: &str = "CASTORETTE_WORKERS";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("{WORKERS_ENV}={0} is not a worker count")]
    Workers(String),
    #[error("invalid duration `{0}`: {1}")]
    Duration(String, String),
}

fn default_port() -> u16 {
    8080
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("castorette-data")
}

fn default_workers() -> usize {
    4
}

fn default_poll() -> String {
    "60s".into()
}

fn default_update() -> String {
    "300s".into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "default_port")]
    pub port: u16,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// File with one `YYYY-MM-DD` per line (`#` starts a comment), or a
    /// JSON array of dates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holidays: Option<PathBuf>,
    #[serde(default = "default_poll")]
    pub poll: String,
    #[serde(default = "default_update")]
    pub update: String,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            port: default_port(),
            data_dir: default_data_dir(),
            workers: default_workers(),
            holidays: None,
            poll: default_poll(),
            update: default_update(),
        }
    }
}

impl Config {
    /// Reads `path` if given, then applies `CASTORETTE_WORKERS`. Relative
    /// paths inside the file are taken relative to the file.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                let mut cfg: Config = serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
                    path: p.to_path_buf(),
                    reason: e.to_string(),
                })?;
                let base = p.parent().unwrap_or(Path::new(""));
                if cfg.data_dir.is_relative() {
                    cfg.data_dir = base.join(&cfg.data_dir);
                }
                if let Some(h) = cfg.holidays.as_mut().filter(|h| h.is_relative()) {
                    *h = base.join(&*h);
                }
                cfg
            }
            None => Config::default(),
        };
        if let Ok(v) = std::env::var(WORKERS_ENV) {
            cfg.workers = v.trim().parse().map_err(|_| ConfigError::Workers(v.clone()))?;
        }
        Ok(cfg)
    }

    pub fn poll_every(&self) -> Result<Duration, ConfigError> {
        parse_duration(&self.poll)
    }

    pub fn update_every(&self) -> Result<Duration, ConfigError> {
        parse_duration(&self.update)
    }

    pub fn holiday_dates(&self) -> Result<Vec<NaiveDate>, ConfigError> {
        match &self.holidays {
            Some(p) => read_holidays(p),
            None => Ok(Vec::new()),
        }
    }
}

pub fn parse_duration(text: &str) -> Result<Duration, ConfigError> {
    humantime::parse_duration(text).map_err(|e| ConfigError::Duration(text.to_string(), e.to_string()))
}

pub fn read_holidays(path: &Path) -> Result<Vec<NaiveDate>, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let parse_err = |reason: String| ConfigError::Parse {
        path: path.to_path_buf(),
        reason,
    };
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()));
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let d = NaiveDate::parse_from_str(line, "%Y-%m-%d").map_err(|e| parse_err(format!("line {}: {e}", i + 1)))?;
        out.push(d);
    }
    out.sort();
    out.dedup();
    Ok(out)
}
