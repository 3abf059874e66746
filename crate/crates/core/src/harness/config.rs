use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::trainer::ExperimentConfig;

/// Parses and validates a TOML experiment config. Unknown keys are errors
/// that list the accepted keys of their section.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn config_to_toml(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))
}
