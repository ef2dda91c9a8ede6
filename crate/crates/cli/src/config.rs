use std::path::Path;

use aggflex::solver::SolverConfig;
use aggflex::{Error, ExperimentConfig, Result};
use serde::Deserialize;

/// Contents of a `--config` TOML file.
///
/// ```toml
/// [solver]
/// backend = "clarabel"
///
/// [experiment]
/// trials = 20
///
/// [experiment.ranges]
/// periods = 12
/// ```
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub solver: SolverConfig,
    pub experiment: ExperimentConfig,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?
            }
            None => Config::default(),
        };
        cfg.solver = cfg.solver.with_env_override()?;
        cfg.solver.validate()?;
        Ok(cfg)
    }
}
