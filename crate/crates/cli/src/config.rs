//! Flat `key=value` configuration, overridden by command-line flags.

use std::path::{Path, PathBuf};

use chrono::FixedOffset;
use mandi_core::eval::Grid;
use mandi_core::impute::ImputeConfig;
use mandi_core::model::ForestParams;
use mandi_service::pipeline::PipelineConfig;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub store: PathBuf,
    /// Directory holding one `{YYYY-MM-DD}.csv` per day for the daily run.
    pub data_dir: PathBuf,
    pub tau: usize,
    pub k: usize,
    pub horizons: Vec<usize>,
    pub history_days: usize,
    pub max_rank: usize,
    pub num_trees: usize,
    pub alpha: f64,
    /// Name of the environment variable holding the admin bearer token.
    pub admin_token_env: String,
    /// Offset used to decide "today" for the daily run.
    pub timezone: FixedOffset,
    pub seed: u64,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            store: PathBuf::from("mandi-store"),
            data_dir: PathBuf::from("data"),
            tau: 10,
            k: 5,
            horizons: vec![1, 7, 14, 28],
            history_days: 730,
            max_rank: 10,
            num_trees: 100,
            alpha: 0.8,
            admin_token_env: "MANDI_ADMIN_TOKEN".into(),
            timezone: FixedOffset::east_opt(5 * 3600 + 1800).expect("valid offset"),
            seed: 0,
        }
    }
}

fn list<T: std::str::FromStr>(value: &str) -> Option<Vec<T>> {
    value.split(',').map(|v| v.trim().parse().ok()).collect()
}

/// Reads `key=value` lines; blank lines and `#` comments are ignored.
fn pairs(text: &str, path: &Path) -> Result<Vec<(usize, String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Config {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected key=value".into(),
            });
        };
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        Self::parse(&read(path)?, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, CliError> {
        let mut c = Self::default();
        for (line, key, value) in pairs(text, path)? {
            let bad = |what: &str| CliError::Config {
                path: path.to_path_buf(),
                line,
                message: format!("{key}: expected {what}, got `{value}`"),
            };
            match key.as_str() {
                "store" => c.store = PathBuf::from(&value),
                "data_dir" => c.data_dir = PathBuf::from(&value),
                "tau" => c.tau = value.parse().map_err(|_| bad("an integer"))?,
                "k" => c.k = value.parse().map_err(|_| bad("an integer"))?,
                "horizons" => c.horizons = list(&value).ok_or_else(|| bad("a comma-separated list of integers"))?,
                "history_days" => c.history_days = value.parse().map_err(|_| bad("an integer"))?,
                "max_rank" => c.max_rank = value.parse().map_err(|_| bad("an integer"))?,
                "num_trees" => c.num_trees = value.parse().map_err(|_| bad("an integer"))?,
                "alpha" => c.alpha = value.parse().map_err(|_| bad("a number"))?,
                "admin_token_env" => c.admin_token_env = value.clone(),
                "timezone" => c.timezone = value.parse().map_err(|_| bad("an offset like +05:30"))?,
                "seed" => c.seed = value.parse().map_err(|_| bad("an integer"))?,
                _ => {
                    return Err(CliError::Config {
                        path: path.to_path_buf(),
                        line,
                        message: format!("unknown key `{key}`"),
                    })
                }
            }
        }
        if c.tau == 0 {
            return Err(CliError::Config {
                path: path.to_path_buf(),
                line: 0,
                message: "tau must be >= 1".into(),
            });
        }
        Ok(c)
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            horizons: self.horizons.clone(),
            tau: self.tau,
            k: self.k,
            history_days: self.history_days,
            impute: ImputeConfig {
                max_rank: self.max_rank,
                rng_seed: self.seed,
                ..Default::default()
            },
            forest: ForestParams {
                num_trees: self.num_trees,
                rng_seed: self.seed,
                ..Default::default()
            },
            alpha: self.alpha,
            ..Default::default()
        }
    }
}

/// Grid file: `max_rank`, `k`, `C` and `num_trees`, each a comma list.
/// Missing keys fall back to the single configured value.
pub fn load_grid(path: &Path, config: &CliConfig) -> Result<Grid, CliError> {
    let mut grid = Grid {
        max_rank: vec![config.max_rank],
        k: vec![config.k],
        c: vec![1.0],
        num_trees: vec![config.num_trees],
    };
    for (line, key, value) in pairs(&read(path)?, path)? {
        let bad = || CliError::Config {
            path: path.to_path_buf(),
            line,
            message: format!("{key}: expected a comma-separated list, got `{value}`"),
        };
        match key.as_str() {
            "max_rank" => grid.max_rank = list(&value).ok_or_else(bad)?,
            "k" => grid.k = list(&value).ok_or_else(bad)?,
            "C" | "c" => grid.c = list(&value).ok_or_else(bad)?,
            "num_trees" => grid.num_trees = list(&value).ok_or_else(bad)?,
            _ => {
                return Err(CliError::Config {
                    path: path.to_path_buf(),
                    line,
                    message: format!("unknown grid key `{key}`"),
                })
            }
        }
    }
    Ok(grid)
}
