use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bank::{gen_synthetic_federation, read_bank, FeatureBank, NormalizationMode, SyntheticSpec};
use crate::error::{Error, Result};
use crate::fed::{BlSettings, FailurePolicy};
use crate::secure::{DEFAULT_FRAC_BITS, DEFAULT_KEY_BITS};
use crate::solver::DEFAULT_LAMBDA;

pub const DEFAULT_PROPORTIONS: [f64; 7] = [0.01, 0.05, 0.1, 0.3, 0.5, 0.7, 1.0];
pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_SCALING_FACTORS: [usize; 4] = [5, 10, 15, 20];

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

fn default_proportions() -> Vec<f64> {
    DEFAULT_PROPORTIONS.to_vec()
}

fn default_folds() -> usize {
    DEFAULT_FOLDS
}

fn default_key_bits() -> u64 {
    DEFAULT_KEY_BITS
}

fn default_frac_bits() -> u32 {
    DEFAULT_FRAC_BITS
}

/// Sweep configuration, read from JSON. Exactly one of `banks` and
/// `synthetic` must be given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// One FBNK file per client.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub banks: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub normalization_mode: NormalizationMode,
    #[serde(default)]
    pub bias: bool,
    #[serde(default = "default_proportions")]
    pub proportions: Vec<f64>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// One seed per fold. Empty means fold `i` uses seed `i + 1`.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub personalize_mix: Option<f64>,
    #[serde(default)]
    pub encrypted: bool,
    #[serde(default = "default_key_bits")]
    pub key_bits: u64,
    #[serde(default = "default_frac_bits")]
    pub frac_bits: u32,
    #[serde(default)]
    pub failure_policy: FailurePolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
}

impl ExperimentConfig {
    fn empty() -> Self {
        Self {
            banks: Vec::new(),
            synthetic: None,
            lambda: DEFAULT_LAMBDA,
            normalization_mode: NormalizationMode::default(),
            bias: false,
            proportions: default_proportions(),
            folds: DEFAULT_FOLDS,
            seeds: Vec::new(),
            personalize_mix: None,
            encrypted: false,
            key_bits: DEFAULT_KEY_BITS,
            frac_bits: DEFAULT_FRAC_BITS,
            failure_policy: FailurePolicy::default(),
            output: None,
            csv: None,
        }
    }

    pub fn synthetic(spec: SyntheticSpec) -> Self {
        Self {
            synthetic: Some(spec),
            ..Self::empty()
        }
    }

    pub fn with_banks(banks: Vec<PathBuf>) -> Self {
        Self { banks, ..Self::empty() }
    }

    /// Parses a config file. Relative bank and output paths are taken
    /// relative to the file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.banks.iter_mut().for_each(rebase);
        cfg.output.iter_mut().for_each(rebase);
        cfg.csv.iter_mut().for_each(rebase);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.banks.is_empty(), &self.synthetic) {
            (true, None) => return Err(Error::invalid("config needs either banks or a synthetic spec")),
            (false, Some(_)) => return Err(Error::invalid("config gives both banks and a synthetic spec")),
            _ => {}
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::invalid(format!("lambda {} must be finite and non-negative", self.lambda)));
        }
        if self.proportions.is_empty() {
            return Err(Error::invalid("proportions must not be empty"));
        }
        if let Some(p) = self.proportions.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return Err(Error::invalid(format!("proportion {p} outside (0, 1]")));
        }
        if self.proportions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("proportions must be strictly ascending"));
        }
        if self.folds == 0 {
            return Err(Error::invalid("folds must be at least 1"));
        }
        if !self.seeds.is_empty() && self.seeds.len() != self.folds {
            return Err(Error::invalid(format!(
                "{} seeds given for {} folds",
                self.seeds.len(),
                self.folds
            )));
        }
        if let Some(m) = self.personalize_mix {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::invalid(format!("personalize_mix {m} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn fold_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            (1..=self.folds as u64).collect()
        } else {
            self.seeds.clone()
        }
    }

    pub fn settings(&self) -> BlSettings {
        BlSettings {
            lambda: self.lambda,
            normalization: self.normalization_mode,
            bias: self.bias,
        }
    }

    /// The per-client banks the sweep splits into train and test.
    pub fn load_clients(&self) -> Result<Vec<FeatureBank>> {
        self.validate()?;
        match &self.synthetic {
            Some(spec) => Ok(gen_synthetic_federation(spec)?.clients),
            None => self.banks.iter().map(read_bank).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_from_minimal_json() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"synthetic": {"seed": 1, "dim": 4, "classes": 2, "sizes": [10], "test_size": 4, "separation": 3.0}}"#,
        )
        .unwrap();
        assert_eq!(cfg.proportions, DEFAULT_PROPORTIONS);
        assert_eq!(cfg.folds, 5);
        assert_eq!(cfg.fold_seeds(), vec![1, 2, 3, 4, 5]);
        assert_eq!(cfg.lambda, DEFAULT_LAMBDA);
        cfg.validate().unwrap();
    }

    #[test]
    fn validation() {
        let base = ExperimentConfig::synthetic(SyntheticSpec::new(1, 4, 2, vec![10], 3.0));
        let bad = |f: fn(&mut ExperimentConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.proportions = vec![0.5, 0.1]));
        assert!(bad(|c| c.proportions = vec![0.0, 1.0]));
        assert!(bad(|c| c.proportions = vec![1.5]));
        assert!(bad(|c| c.folds = 0));
        assert!(bad(|c| c.seeds = vec![1, 2]));
        assert!(bad(|c| c.personalize_mix = Some(2.0)));
        assert!(bad(|c| c.banks = vec!["a.fbnk".into()]));
        assert!(bad(|c| c.synthetic = None));
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"synthetic": null, "foldz": 3}"#).is_err());
    }

    #[test]
    fn relative_paths_follow_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        fs::write(&p, r#"{"banks": ["a.fbnk", "/abs/b.fbnk"], "output": "out.json"}"#).unwrap();
        let cfg = ExperimentConfig::from_file(&p).unwrap();
        assert_eq!(cfg.banks[0], dir.path().join("a.fbnk"));
        assert_eq!(cfg.banks[1], PathBuf::from("/abs/b.fbnk"));
        assert_eq!(cfg.output, Some(dir.path().join("out.json")));
    }
}
