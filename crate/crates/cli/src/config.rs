//! Optional TOML config file. Command-line flags override its values, and
//! its values override built-in defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::failure::usage;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct FileConfig {
    pub data_dir: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub t_noncovid: Option<f64>,
    pub t_all: Option<f64>,
    pub head: Option<String>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub warmup: Option<usize>,
    pub batch_size: Option<usize>,
    pub hidden: Option<usize>,
    pub label_smoothing: Option<f64>,
    pub sam_rho: Option<f64>,
    pub folds: Option<usize>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
}

impl FileConfig {
    /// Relative paths in the file are resolved against its directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: FileConfig =
            toml::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.data_dir,
            &mut cfg.labels,
            &mut cfg.predictions,
            &mut cfg.features,
            &mut cfg.model,
            &mut cfg.out,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}
