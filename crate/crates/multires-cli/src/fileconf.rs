//! Optional TOML configuration file.
//!
//! Keys mirror the long flags (`lr = 0.2`, `seeds = [0, 1]`,
//! `method = "onlyfine,multires-mil"`); lists use TOML arrays except
//! `method`, which is a comma-separated string exactly like the flag.
//! Unknown keys are rejected. Explicit flags always override file values.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::commands::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub data_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Comma-separated method names.
    pub method: Option<String>,
    pub seeds: Option<Vec<u64>>,
    pub lambda: Option<Vec<f64>>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub smax_base: Option<f64>,
    pub consistency_reduce: Option<String>,
    pub model: Option<String>,
    pub hidden_dim: Option<usize>,
    pub budgets: Option<Vec<usize>>,
    pub folds: Option<usize>,
    pub checkpoint: Option<PathBuf>,

    // generator parameters
    pub grid_side: Option<usize>,
    pub ratio: Option<usize>,
    pub fine_dim: Option<usize>,
    pub coarse_dim: Option<usize>,
    pub class_sep: Option<f64>,
    pub noise: Option<f64>,
    pub label_channel_noise: Option<f64>,
    pub coarse_labeled: Option<usize>,
    pub fine_labeled: Option<usize>,
    pub rho_min: Option<f64>,
    pub positive_cell_prob: Option<f64>,
}

/// Load the file named by `--config`, or an empty config when absent.
/// Unreadable or malformed files are usage errors.
pub fn load(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Usage(format!("cannot read config file {}: {e}", path.display()))
    })?;
    toml::from_str(&text).map_err(|e| {
        CliError::Usage(format!("config file {}: {e}", path.display()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_mirrored_keys() {
        let cfg: FileConfig = toml::from_str(
            "epochs = 20\nseeds = [3, 4]\nlambda = [0.1]\nmethod = \"onlyfine\"\ngrid_side = 4\n",
        )
        .unwrap();
        assert_eq!(cfg.epochs, Some(20));
        assert_eq!(cfg.seeds, Some(vec![3, 4]));
        assert_eq!(cfg.lambda, Some(vec![0.1]));
        assert_eq!(cfg.method.as_deref(), Some("onlyfine"));
        assert_eq!(cfg.grid_side, Some(4));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("no_such_key = 1\n").is_err());
    }

    #[test]
    fn missing_file_is_a_usage_error() {
        let err = load(Some(Path::new("/nonexistent/conf.toml"))).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
    }
}
