//! Run configuration: everything needed to reproduce a run bit for bit.

use std::path::{Path, PathBuf};

use orbit_core::model::{ModelConfig, Vocab};
use orbit_core::tasks::{
    gen_capability, gen_retrieval, CapabilityTask, RetrievalConfig, RetrievalEvalOptions,
    RetrievalWorld,
};
use orbit_core::train::{LrSchedule, Optimizer, RegularizerSpec, TrainConfig};
use orbit_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Human-readable prefix of the run directory name.
    pub run_id: String,
    /// Parent directory of all run directories.
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub capability: CapabilitySpec,
    pub retrieval: RetrievalSpec,
    #[serde(default)]
    pub eval: RetrievalEvalOptions,
    pub pretrain: PretrainSpec,
    pub finetune: FinetuneSpec,
}

/// Capability-task split; the key count comes from `model.vocab`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapabilitySpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Retrieval world; the SID vocabulary size comes from `model.vocab`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalSpec {
    pub seed: u64,
    pub world: RetrievalConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSpec {
    pub train: TrainConfig,
    #[serde(default = "default_target")]
    pub target: f64,
}

fn default_target() -> f64 {
    0.95
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSpec {
    pub train: TrainConfig,
    pub regularizer: RegularizerSpec,
}

/// Generated data for one configuration.
pub struct Data {
    pub capability: CapabilityTask,
    pub world: RetrievalWorld,
}

impl RunConfig {
    /// The configuration the acceptance suite is calibrated on.
    pub fn lab_default() -> Self {
        let adam = |beta2| Optimizer::Adam {
            beta1: 0.9,
            beta2,
            eps: 1e-8,
        };
        RunConfig {
            run_id: "lab".to_owned(),
            out_dir: PathBuf::from("runs"),
            model: ModelConfig::new(12, 32, 64, Vocab::new(16, 64)),
            capability: CapabilitySpec {
                seed: 1,
                n_train: 200,
                n_test: 56,
            },
            retrieval: RetrievalSpec {
                seed: 2,
                world: RetrievalConfig::default(),
            },
            eval: RetrievalEvalOptions::default(),
            pretrain: PretrainSpec {
                train: TrainConfig {
                    steps: 20_000,
                    batch_size: 64,
                    schedule: LrSchedule::Constant { lr: 0.003 },
                    optimizer: adam(0.98),
                    eval_every: 500,
                    checkpoint_every: 20_000,
                    seed: 1,
                    weight_decay: 1.0,
                },
                target: 0.95,
            },
            finetune: FinetuneSpec {
                train: TrainConfig {
                    steps: 8000,
                    batch_size: 64,
                    schedule: LrSchedule::CosineWithWarmup {
                        peak: 0.03,
                        min: 0.003,
                        warmup_steps: 400,
                        decay_steps: 7600,
                    },
                    optimizer: adam(0.999),
                    eval_every: 400,
                    checkpoint_every: 400,
                    seed: 3,
                    weight_decay: 0.0,
                },
                regularizer: RegularizerSpec::None,
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        let id_ok = !self.run_id.is_empty()
            && self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            && !self.run_id.starts_with('.');
        if !id_ok {
            return Err(Error::InvalidConfig(format!(
                "run_id `{}` must be non-empty and use only [A-Za-z0-9._-]",
                self.run_id
            )));
        }
        self.model.validate()?;
        let k = self.model.vocab.key_count as usize;
        if self.capability.n_train + self.capability.n_test > k * k {
            return Err(Error::InvalidConfig(format!(
                "capability split {} + {} exceeds {} distinct queries",
                self.capability.n_train,
                self.capability.n_test,
                k * k
            )));
        }
        if !(0.0..=1.0).contains(&self.pretrain.target) {
            return Err(Error::InvalidConfig(
                "pretrain target must lie in [0, 1]".to_owned(),
            ));
        }
        self.pretrain.train.validate()?;
        self.finetune.train.validate()?;
        self.finetune.regularizer.validate()
    }

    pub fn data(&self) -> Result<Data> {
        let capability = gen_capability(
            self.capability.seed,
            self.model.vocab.key_count,
            self.capability.n_train,
            self.capability.n_test,
        )?;
        let world = gen_retrieval(
            self.retrieval.seed,
            self.retrieval.world,
            self.model.vocab.sid_size,
        )?;
        Ok(Data { capability, world })
    }

    /// Digest of everything that determines the pretrained origin.
    pub fn pretrain_digest(&self) -> String {
        digest(&serde_json::json!({
            "model": self.model,
            "capability": self.capability,
            "pretrain": self.pretrain,
        }))
    }

    /// Digest of everything that determines a fine-tuning run. The output
    /// location is not part of the content.
    pub fn run_digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        v.as_object_mut().expect("object").remove("out_dir");
        digest(&v)
    }

    pub fn pretrain_dir(&self) -> PathBuf {
        self.out_dir
            .join(format!("pretrain-{}", &self.pretrain_digest()[..12]))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir
            .join(format!("{}-{}", self.run_id, &self.run_digest()[..12]))
    }
}

fn digest(value: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(value).expect("json value serialises");
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let c = RunConfig::lab_default();
        c.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = serde_json::to_value(RunConfig::lab_default()).unwrap();
        v["surprise"] = serde_json::json!(1);
        assert!(serde_json::from_value::<RunConfig>(v.clone()).is_err());
        let mut v = serde_json::to_value(RunConfig::lab_default()).unwrap();
        v["finetune"]["train"]["lr"] = serde_json::json!(1);
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }

    #[test]
    fn digests_track_content_not_location() {
        let a = RunConfig::lab_default();
        let mut b = a.clone();
        b.out_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.run_digest(), b.run_digest());
        b.finetune.regularizer = RegularizerSpec::SoupToGo { cadence: 10 };
        assert_ne!(a.run_digest(), b.run_digest());
        assert_eq!(a.pretrain_digest(), b.pretrain_digest());
        b.pretrain.train.seed = 9;
        assert_ne!(a.pretrain_digest(), b.pretrain_digest());
    }

    #[test]
    fn bad_run_ids_rejected() {
        let mut c = RunConfig::lab_default();
        for id in ["", "a/b", "..", "x y"] {
            c.run_id = id.to_owned();
            assert!(c.validate().is_err(), "{id}");
        }
    }
}
