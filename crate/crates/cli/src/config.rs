//! JSON run configuration. Precedence: built-in defaults, then the config
//! file, then command-line flags.

use std::path::{Path, PathBuf};

use neuralpkpd::baseline::PriorSpec;
use neuralpkpd::cohort::CohortConfig;
use neuralpkpd::model::ModelConfig;
use neuralpkpd::pipeline::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Additive residual sd of PK observations (µg/mL).
    pub sigma_pk: f64,
    /// Additive residual sd of platelet observations (10⁹/L).
    pub sigma_platelet: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        let p = PriorSpec::default();
        BaselineConfig { sigma_pk: p.sigma_pk, sigma_platelet: p.sigma_platelet }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    /// Directory holding train.csv, test.csv and truth.csv.
    pub data_dir: Option<PathBuf>,
    /// Checkpoint read by `evaluate` and `simulate-regimen`.
    pub checkpoint: Option<PathBuf>,
    /// Directory for reports written by `evaluate` and `simulate-regimen`.
    pub reports: Option<PathBuf>,
    pub split_ratio: f64,
    pub cohort: CohortConfig,
    pub model: ModelConfig,
    pub train_pk: TrainConfig,
    pub train_pd: TrainConfig,
    pub baseline: BaselineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            data_dir: None,
            checkpoint: None,
            reports: None,
            split_ratio: 0.8,
            cohort: CohortConfig::default(),
            model: ModelConfig::default(),
            train_pk: TrainConfig::default(),
            train_pd: TrainConfig::pd_default(),
            baseline: BaselineConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data_dir, &mut cfg.checkpoint, &mut cfg.reports].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(s) = cfg.seed {
            cfg.cohort.seed = s;
            cfg.train_pk.seed = s;
            cfg.train_pd.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(CliError::Config(format!("split_ratio {} must lie in (0, 1)", self.split_ratio)));
        }
        self.cohort.validate()?;
        self.model.validate()?;
        self.train_pk.validate()?;
        self.train_pd.validate()?;
        if !(self.baseline.sigma_pk > 0.0 && self.baseline.sigma_platelet > 0.0) {
            return Err(CliError::Config("baseline residual sds must be positive".into()));
        }
        if let Some(c) = &self.checkpoint {
            if !c.is_file() {
                return Err(CliError::Config(format!("checkpoint {} does not exist", c.display())));
            }
        }
        Ok(())
    }

    /// Prior for data without recorded body weight: per-kg typical values
    /// with the weight spread folded into the PK omegas.
    pub fn baseline_prior(&self) -> PriorSpec {
        let c = &self.cohort;
        let mut p = PriorSpec::per_kg(&c.typical, c.omegas, c.weight_mean, c.weight_sd / c.weight_mean);
        p.sigma_pk = self.baseline.sigma_pk;
        p.sigma_platelet = self.baseline.sigma_platelet;
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"model": {"pk_gru": 4, "bogus": 1}}"#).unwrap();
        assert!(matches!(RunConfig::load(Some(&p)), Err(CliError::Config(_))));
        std::fs::write(&p, r#"{"nope": 1}"#).unwrap();
        assert!(RunConfig::load(Some(&p)).is_err());
    }

    #[test]
    fn partial_config_keeps_defaults_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 9, "data_dir": "data", "model": {"pk_gru": 4}}"#).unwrap();
        let c = RunConfig::load(Some(&p)).unwrap();
        assert_eq!(c.model.pk_gru, 4);
        assert_eq!(c.model.pd_gru, ModelConfig::default().pd_gru);
        assert_eq!(c.train_pd.epochs, 3000);
        assert_eq!((c.cohort.seed, c.train_pk.seed), (9, 9));
        assert_eq!(c.data_dir.unwrap(), dir.path().join("data"));
    }
}
