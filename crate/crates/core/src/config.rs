//! Run configuration: one JSON document describing an experiment.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{FreezePolicy, NqmRule, PerceptionScope};
use crate::data::DomainSpec;
use crate::error::{Error, Result};
use crate::metrics::{EvalConfig, InferenceMode};
use crate::nca::ArchConfig;
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Synthetic benchmark generated by `gen-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Cases per domain, before the train/test split.
    pub n_cases: usize,
    pub test_fraction: f64,
    pub split_seed: u64,
    /// Domains in task order; empty means the built-in three-domain
    /// benchmark.
    #[serde(default)]
    pub domains: Vec<DomainSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_cases: 25,
            test_fraction: 0.2,
            split_seed: 3,
            domains: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub arch: ArchConfig,
    /// Training hyper-parameters. Its `seed` may be omitted; the run seed
    /// is used either way.
    pub train: TrainConfig,
    pub policy: FreezePolicy,
    pub perception_scope: PerceptionScope,
    pub nqm_rule: NqmRule,
    pub n_samples: usize,
    #[serde(default = "default_inference_mode")]
    pub inference_mode: InferenceMode,
    #[serde(default)]
    pub data: DataConfig,
    pub data_dir: PathBuf,
    pub runs_dir: PathBuf,
}

fn default_inference_mode() -> InferenceMode {
    InferenceMode::Nqm
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_VERSION,
            seed: 42,
            arch: ArchConfig::default_2d(),
            train: TrainConfig {
                epochs: 200,
                seed: 42,
                ..TrainConfig::default()
            },
            policy: FreezePolicy::Ncadapt,
            perception_scope: PerceptionScope::Shared,
            nqm_rule: NqmRule::Min,
            n_samples: 10,
            inference_mode: default_inference_mode(),
            data: DataConfig::default(),
            data_dir: PathBuf::from("data"),
            runs_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != CONFIG_VERSION {
            return bad(format!("schema_version {} is not {CONFIG_VERSION}", self.schema_version));
        }
        if self.train.seed != self.seed && self.train.seed != 0 {
            return bad(format!("train.seed {} conflicts with seed {}", self.train.seed, self.seed));
        }
        if self.n_samples < 2 {
            return bad("n_samples must be at least 2 for quality-score selection".into());
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) || self.data.n_cases < 5 {
            return bad("data needs at least 5 cases and a test fraction in (0, 1)".into());
        }
        self.arch.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        for d in &self.data.domains {
            d.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Training configuration with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            mode: self.inference_mode,
            n_samples: self.n_samples,
            rule: self.nqm_rule,
            seed: self.seed,
        }
    }

    /// Domains in task order.
    pub fn domains(&self) -> Vec<DomainSpec> {
        if self.data.domains.is_empty() {
            DomainSpec::benchmark(self.data.n_cases, self.seed)
        } else {
            self.data.domains.clone()
        }
    }

    /// SHA-256 of everything that influences results. Directory paths are
    /// left out, so moving a run does not change its hash.
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            data_dir: PathBuf::new(),
            runs_dir: PathBuf::new(),
            train: self.train_config(),
            ..self.clone()
        };
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::default().to_json().unwrap()).unwrap();
        v["surprise"] = 1.into();
        assert!(matches!(RunConfig::from_json(&v.to_string()), Err(Error::Config(_))));
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::default().to_json().unwrap()).unwrap();
        v["arch"]["surprise"] = 1.into();
        assert!(RunConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let cfg = RunConfig {
            schema_version: 99,
            ..RunConfig::default()
        };
        assert!(RunConfig::from_json(&cfg.to_json().unwrap()).is_err());
    }

    #[test]
    fn hash_ignores_paths_but_not_settings() {
        let a = RunConfig::default();
        let b = RunConfig {
            runs_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig { seed: 7, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn omitted_train_seed_follows_run_seed() {
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::default().to_json().unwrap()).unwrap();
        v["train"]["seed"] = 0.into();
        let cfg = RunConfig::from_json(&v.to_string()).unwrap();
        assert_eq!(cfg.train_config().seed, 42);
        assert_eq!(cfg.hash(), RunConfig::default().hash());
    }
}
