//! Flat key = value run configuration files.
//!
//! Unknown keys are hard errors (no silent typos); errors carry line
//! numbers. Blank lines and `#` comments are allowed.

use std::fs;
use std::path::Path;

use eqgap::engine::{Regularizer, RegistrationConfig, Similarity};
use eqgap::mechanics::lame_from_youngs;
use serde::Serialize;

use crate::CliError;

/// Resolved configuration snapshot, also serialized into manifests.
#[derive(Debug, Clone, Serialize)]
pub struct ConfigSnapshot {
    pub beta: f64,
    pub similarity: String,
    pub regularizer: String,
    pub youngs: f64,
    pub poisson: f64,
    pub mu: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub control_spacing: f64,
    pub determinism: bool,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub engine: RegistrationConfig,
    pub youngs: f64,
    pub poisson: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            engine: RegistrationConfig::default(),
            youngs: 1.0,
            poisson: 0.0,
        }
    }
}

impl RunConfig {
    pub fn snapshot(&self) -> ConfigSnapshot {
        ConfigSnapshot {
            beta: self.engine.beta,
            similarity: match self.engine.similarity {
                Similarity::Mse => "mse".into(),
                Similarity::Ncc => "ncc".into(),
            },
            regularizer: match self.engine.regularizer {
                Regularizer::Bending => "bending".into(),
                Regularizer::Physics => "physics".into(),
            },
            youngs: self.youngs,
            poisson: self.poisson,
            mu: self.engine.material.mu,
            lambda: self.engine.material.lambda,
            batch_size: self.engine.batch_size,
            iterations: self.engine.iterations,
            learning_rate: self.engine.learning_rate,
            seed: self.engine.seed,
            control_spacing: self.engine.control_spacing,
            determinism: self.engine.determinism,
        }
    }
}

fn config_err(path: &Path, lineno: usize, msg: impl Into<String>) -> CliError {
    CliError::Config(format!(
        "{}:{}: {}",
        path.display(),
        lineno,
        msg.into()
    ))
}

pub fn parse_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = RunConfig::default();
    let mut youngs = 1.0f64;
    let mut poisson = 0.0f64;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, val)) = line.split_once('=') else {
            return Err(config_err(path, lineno, format!("expected key = value, got '{line}'")));
        };
        let key = key.trim();
        let val = val.trim();
        let bad_num = |what: &str| config_err(path, lineno, format!("bad {what} '{val}'"));
        match key {
            "beta" => cfg.engine.beta = val.parse().map_err(|_| bad_num("number"))?,
            "similarity" => {
                cfg.engine.similarity = match val {
                    "mse" => Similarity::Mse,
                    "ncc" => Similarity::Ncc,
                    _ => {
                        return Err(config_err(
                            path,
                            lineno,
                            format!("similarity must be mse or ncc, got '{val}'"),
                        ))
                    }
                }
            }
            "regularizer" => {
                cfg.engine.regularizer = match val {
                    "bending" => Regularizer::Bending,
                    "physics" => Regularizer::Physics,
                    _ => {
                        return Err(config_err(
                            path,
                            lineno,
                            format!("regularizer must be bending or physics, got '{val}'"),
                        ))
                    }
                }
            }
            "youngs" => youngs = val.parse().map_err(|_| bad_num("number"))?,
            "poisson" => poisson = val.parse().map_err(|_| bad_num("number"))?,
            "batch_size" => cfg.engine.batch_size = val.parse().map_err(|_| bad_num("integer"))?,
            "iterations" => cfg.engine.iterations = val.parse().map_err(|_| bad_num("integer"))?,
            "learning_rate" => {
                cfg.engine.learning_rate = val.parse().map_err(|_| bad_num("number"))?
            }
            "seed" => cfg.engine.seed = val.parse().map_err(|_| bad_num("integer"))?,
            "control_spacing" => {
                cfg.engine.control_spacing = val.parse().map_err(|_| bad_num("number"))?
            }
            "determinism" => {
                cfg.engine.determinism = match val {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    _ => {
                        return Err(config_err(
                            path,
                            lineno,
                            format!("determinism must be true or false, got '{val}'"),
                        ))
                    }
                }
            }
            _ => {
                return Err(config_err(path, lineno, format!("unknown key '{key}'")));
            }
        }
    }
    cfg.engine.material =
        lame_from_youngs(youngs, poisson).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.youngs = youngs;
    cfg.poisson = poisson;
    Ok(cfg)
}
