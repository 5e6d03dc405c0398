//! JSON experiment configuration: trainer knobs plus task-family descriptors.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::env::{make_task_family, PlantKind, PlantSpec};
use crate::error::{Error, Result};
use crate::trainer::TrainerConfig;

/// Which plant family to build and how many perturbed variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilyConfig {
    pub kind: PlantKind,
    pub n_tasks: usize,
    pub seed: u64,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        Self {
            kind: PlantKind::Smsm,
            n_tasks: 3,
            seed: 0,
        }
    }
}

impl FamilyConfig {
    pub fn build(&self) -> Result<Vec<PlantSpec>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        make_task_family(self.kind, self.n_tasks, &mut rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub kind: PlantKind,
    pub n_tasks: usize,
    pub seed: u64,
    pub paired_seeds: usize,
    /// Iterations per target task; `None` reuses the trainer budget.
    pub iterations: Option<usize>,
    /// MLE epochs before the adversarial loop on target tasks; `None` reuses the trainer value.
    pub pretrain_epochs: Option<usize>,
    pub pretrain_lr: Option<f64>,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            kind: PlantKind::Pac,
            n_tasks: 1,
            seed: 0,
            paired_seeds: 5,
            iterations: None,
            pretrain_epochs: None,
            pretrain_lr: None,
        }
    }
}

impl TransferConfig {
    pub fn family(&self) -> FamilyConfig {
        FamilyConfig {
            kind: self.kind,
            n_tasks: self.n_tasks,
            seed: self.seed,
        }
    }

    /// Trainer settings for the target tasks.
    pub fn target_trainer(&self, base: &TrainerConfig) -> TrainerConfig {
        let mut cfg = base.clone();
        if let Some(it) = self.iterations {
            cfg.iterations = it;
        }
        if let Some(ep) = self.pretrain_epochs {
            cfg.pretrain_epochs = ep;
        }
        if let Some(lr) = self.pretrain_lr {
            cfg.pretrain_lr = lr;
        }
        cfg
    }

    /// Paired seeds `base + 1 ..= base + paired_seeds`.
    pub fn seeds(&self, base: u64) -> Vec<u64> {
        (1..=self.paired_seeds as u64).map(|i| base.wrapping_add(i)).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentConfig {
    pub trainer: TrainerConfig,
    pub environments: FamilyConfig,
    pub transfer: TransferConfig,
}

fn section<T: for<'de> Deserialize<'de> + Default>(
    map: &mut serde_json::Map<String, Value>,
    key: &str,
) -> Result<T> {
    match map.remove(key) {
        None => Ok(T::default()),
        Some(v) => serde_json::from_value(v).map_err(|e| Error::Config(format!("`{key}`: {e}"))),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| {
            Error::Config(format!(
                "malformed JSON at line {}, column {}: {e}",
                e.line(),
                e.column()
            ))
        })?;
        let Value::Object(mut map) = value else {
            return Err(Error::Config("top level must be a JSON object".into()));
        };
        let environments: FamilyConfig = section(&mut map, "environments")?;
        let transfer: TransferConfig = section(&mut map, "transfer")?;
        let trainer: TrainerConfig = serde_json::from_value(Value::Object(map))
            .map_err(|e| Error::Config(e.to_string()))?;
        let cfg = Self {
            trainer,
            environments,
            transfer,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        if self.environments.n_tasks == 0 {
            return Err(Error::Config("`environments.n_tasks` must be at least 1".into()));
        }
        if self.transfer.n_tasks == 0 {
            return Err(Error::Config("`transfer.n_tasks` must be at least 1".into()));
        }
        if self.transfer.paired_seeds == 0 {
            return Err(Error::Config("`transfer.paired_seeds` must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut value = serde_json::to_value(&self.trainer).expect("config serializes");
        let map = value.as_object_mut().expect("object");
        map.insert(
            "environments".into(),
            serde_json::to_value(&self.environments).expect("serializes"),
        );
        map.insert(
            "transfer".into(),
            serde_json::to_value(&self.transfer).expect("serializes"),
        );
        serde_json::to_string_pretty(&value).expect("serializes")
    }

    pub fn task_family(&self) -> Result<Vec<PlantSpec>> {
        self.environments.build()
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.trainer.seed = s;
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.trainer.gamma, 0.99);
        assert_eq!(cfg.trainer.batch_size, 25);
        assert_eq!(cfg.trainer.gen_lr, 0.1);
        assert_eq!(cfg.trainer.seq_len, 20);
    }

    #[test]
    fn gamma_out_of_range_names_field() {
        let err = ExperimentConfig::from_json(r#"{"gamma": 1.5}"#).unwrap_err();
        assert!(err.to_string().contains("`gamma`"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"gama": 0.9}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"environments": {"kinds": "PAC"}}"#).is_err());
    }

    #[test]
    fn malformed_reports_line() {
        let err = ExperimentConfig::from_json("{\n\"gamma\": 0.9,\n}").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.trainer.gamma = 0.95;
        cfg.environments.kind = PlantKind::Tlmdcp;
        cfg.transfer.iterations = Some(7);
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let d = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json(&d.to_json()).unwrap(), d);
    }

    #[test]
    fn sections_parse() {
        let cfg = ExperimentConfig::from_json(
            r#"{"iterations": 5, "environments": {"kind": "PAC", "n_tasks": 2, "seed": 9}}"#,
        )
        .unwrap();
        assert_eq!(cfg.trainer.iterations, 5);
        assert_eq!(cfg.environments.kind, PlantKind::Pac);
        assert_eq!(cfg.task_family().unwrap().len(), 2);
    }
}
