//! Pipeline configuration, loadable from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ConfigError;
use crate::evidence::ErrorModelConfig;
use crate::fitting::SolverConfig;
use crate::friction::{FrictionPriorConfig, RigConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestionConfig {
    /// Common clock rate after resampling, Hz.
    pub rate_hz: f64,
    /// Moving-average window (samples) for velocity estimates.
    pub smoothing_window: usize,
}

impl Default for IngestionConfig {
    fn default() -> Self {
        Self {
            rate_hz: 100.0,
            smoothing_window: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub error_model: ErrorModelConfig,
    pub friction: FrictionPriorConfig,
    pub solver: SolverConfig,
    pub ingestion: IngestionConfig,
    pub rig: RigConfig,
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable in TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.error_model.validate().map_err(ConfigError::Invalid)?;
        self.solver.validate().map_err(ConfigError::Invalid)?;
        self.friction
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.rig
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.ingestion.rate_hz > 0.0 && self.ingestion.rate_hz.is_finite()) {
            return Err(ConfigError::Invalid(format!(
                "ingestion.rate_hz must be positive, got {}",
                self.ingestion.rate_hz
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML form, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let back = Config::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn partial_sections_override() {
        let cfg = Config::from_toml_str("[error_model]\nr_se = 0.01\n[friction]\nmu_bar = 0.4\n").unwrap();
        assert_eq!(cfg.error_model.r_se, 0.01);
        assert_eq!(cfg.error_model.q_se, 0.05);
        assert_eq!(cfg.friction.mu_bar, 0.4);
        assert_ne!(cfg.hash(), Config::default().hash());
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(
            Config::from_toml_str("[solver]\nbogus = 1\n"),
            Err(ConfigError::Parse(_))
        ));
        assert!(matches!(
            Config::from_toml_str("[error_model]\nr_se = -1.0\n"),
            Err(ConfigError::Invalid(_))
        ));
    }
}
