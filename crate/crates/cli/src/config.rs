//! Optional TOML config file. Values here sit between command-line flags
//! (which win) and built-in defaults.

use std::path::Path;

use serde::Deserialize;

use crate::UserError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub label_col: Option<String>,
    pub features: Option<Vec<String>>,
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    pub cov_mode: Option<String>,
    pub tol: Option<f64>,
    pub max_sweeps: Option<usize>,
    pub folds: Option<usize>,
    pub n_lambda: Option<usize>,
    pub ratio: Option<f64>,
    pub seed: Option<u64>,
    pub stratified: Option<bool>,
    pub n_test: Option<usize>,
    pub reps: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| UserError(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = toml::from_str(&text).map_err(|e| UserError(format!("invalid config {}: {e}", path.display())))?;
        Ok(cfg)
    }
}

/// First of flag, config value, default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}
