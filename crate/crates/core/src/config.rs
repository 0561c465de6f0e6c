//! Run configuration as a TOML document with dotted-key overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::attacks::AttackConfig;
use crate::data::SyntheticCausalConfig;
use crate::error::{Error, Result};
use crate::models::NetworkSpec;
use crate::objectives::{ObjectiveSpec, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetId {
    Mnist,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub id: DatasetId,
    /// Training samples taken from the head of the training split
    /// (validation rows included); all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_samples: Option<usize>,
    /// Evaluation samples taken from the head of the test split; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticCausalConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs after which the learning rate is multiplied by `lr_decay`.
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "tenth")]
    pub lr_decay: f64,
    /// Global L2 norm the gradient is scaled down to before each step.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

fn tenth() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedAttack {
    pub name: String,
    #[serde(flatten)]
    pub config: AttackConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointPolicy {
    pub save_best: bool,
    pub save_last: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub validation_size: usize,
    pub precision: Precision,
    pub threads: usize,
    pub dataset: DatasetConfig,
    pub network: NetworkSpec,
    pub objective: ObjectiveSpec,
    pub optimizer: OptimizerConfig,
    /// Inner maximization during training; its loss kind follows the objective variant.
    pub train_attack: AttackConfig,
    /// Epochs over which the training radius and step size ramp linearly up
    /// to `train_attack`; 0 attacks at full strength from the start.
    #[serde(default)]
    pub epsilon_warmup: usize,
    /// Per-epoch robust validation attack.
    pub val_attack: AttackConfig,
    pub eval_attacks: Vec<NamedAttack>,
    pub checkpoint: CheckpointPolicy,
}

impl RunConfig {
    /// Desk-scale MNIST: 10k training samples (validation is the next 1000),
    /// 15 epochs, PGD-10 training at `epsilon = 0.3` ramped in over the first
    /// 8 epochs, SGD with momentum 0.9 at lr 0.01 dropped 10x at epoch 12,
    /// batch 32, gradient norm clipped at 10.
    pub fn mnist(variant: Variant) -> Self {
        let eps = 0.3;
        let mut train_attack = AttackConfig::pgd(eps, 0.075, 10);
        train_attack.loss_kind = variant.inner_loss();
        RunConfig {
            seed: 0,
            epochs: 15,
            batch_size: 32,
            validation_size: 1000,
            precision: Precision::F32,
            threads: 1,
            dataset: DatasetConfig {
                id: DatasetId::Mnist,
                train_samples: Some(10_000),
                test_samples: Some(1000),
                synthetic: None,
            },
            network: NetworkSpec::mnist_desk(),
            objective: ObjectiveSpec::new(variant),
            optimizer: OptimizerConfig {
                lr: 0.01,
                momentum: 0.9,
                weight_decay: 0.0,
                milestones: vec![12],
                lr_decay: 0.1,
                grad_clip: Some(10.0),
            },
            val_attack: AttackConfig::pgd(eps, 0.075, 10),
            eval_attacks: mnist_eval_attacks(),
            train_attack,
            epsilon_warmup: 8,
            checkpoint: CheckpointPolicy {
                save_best: true,
                save_last: true,
            },
        }
    }

    /// Full schedule: 60k samples, 50 epochs, PGD-40 training, mnist_cnn.
    pub fn mnist_full(variant: Variant) -> Self {
        let mut cfg = Self::mnist(variant);
        cfg.epochs = 50;
        cfg.optimizer.milestones = vec![40];
        cfg.dataset.train_samples = None;
        cfg.dataset.test_samples = None;
        cfg.network = NetworkSpec::mnist_cnn();
        cfg.train_attack = AttackConfig::pgd(0.3, 0.01, 40).with_loss(variant.inner_loss());
        cfg
    }

    pub fn synthetic(variant: Variant, synth: SyntheticCausalConfig) -> Self {
        let features = synth.features();
        let classes = synth.classes;
        let mut cfg = Self::mnist(variant);
        cfg.epochs = 20;
        cfg.batch_size = 64;
        cfg.validation_size = 500;
        cfg.epsilon_warmup = 0;
        cfg.optimizer.milestones.clear();
        cfg.optimizer.grad_clip = None;
        cfg.precision = Precision::F64;
        cfg.dataset = DatasetConfig {
            id: DatasetId::Synthetic,
            train_samples: Some(4000),
            test_samples: Some(2000),
            synthetic: Some(synth),
        };
        cfg.network = NetworkSpec::mlp(features, vec![32], classes).with_style_dim(8);
        cfg.optimizer.lr = 0.05;
        cfg.train_attack = AttackConfig::pgd(0.1, 0.025, 10).with_loss(variant.inner_loss());
        cfg.val_attack = AttackConfig::pgd(0.1, 0.025, 10);
        cfg.eval_attacks = vec![NamedAttack {
            name: "pgd-20".into(),
            config: AttackConfig::pgd(0.1, 0.01, 20),
        }];
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.threads == 0 {
            return bad("threads must be >= 1".into());
        }
        if self.optimizer.milestones.iter().any(|&m| m >= self.epochs.max(1)) {
            return bad(format!("milestones {:?} must be < epochs {}", self.optimizer.milestones, self.epochs));
        }
        if !(self.optimizer.lr > 0.0) || !(0.0..1.0).contains(&self.optimizer.momentum) || !(self.optimizer.weight_decay >= 0.0) {
            return bad("optimizer needs lr > 0, momentum in [0, 1), weight_decay >= 0".into());
        }
        if self.dataset.id == DatasetId::Synthetic && self.dataset.synthetic.is_none() {
            return bad("synthetic dataset needs a [dataset.synthetic] table".into());
        }
        self.network.validate()?;
        self.objective.validate()?;
        self.train_attack.validate()?;
        self.val_attack.validate()?;
        for a in &self.eval_attacks {
            a.config.validate()?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Applies `key=value` overrides to existing keys. Values parse as TOML
    /// (numbers, booleans, arrays, quoted strings); bare words are strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut table: Table = Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_dotted(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().ok_or_else(|| Error::Config("empty override key".into()))?;
    let mut cur = table;
    for p in path {
        cur = match cur.get_mut(*p) {
            Some(Value::Table(t)) => t,
            _ => return Err(Error::Config(format!("unknown override key {key:?}"))),
        };
    }
    match cur.get_mut(*last) {
        Some(slot) => {
            // keep integer/float distinction of the schema
            *slot = match (&*slot, value) {
                (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
                (_, v) => v,
            };
            Ok(())
        }
        // unset optional field; deserialization rejects unknown names
        None => {
            cur.insert(last.to_string(), value);
            Ok(())
        }
    }
}

/// Default evaluation attacks for MNIST: FGSM, PGD-40, CW-40 at `epsilon = 0.3`.
pub fn mnist_eval_attacks() -> Vec<NamedAttack> {
    use crate::attacks::LossKind;
    vec![
        NamedAttack {
            name: "fgsm".into(),
            config: AttackConfig::fgsm(0.3),
        },
        NamedAttack {
            name: "pgd-40".into(),
            config: AttackConfig::mnist_pgd40(),
        },
        NamedAttack {
            name: "cw-40".into(),
            config: AttackConfig::mnist_pgd40().with_loss(LossKind::CwMargin),
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::mnist(Variant::CausaladvM);
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn overrides() {
        let cfg = RunConfig::mnist(Variant::CausaladvM);
        let o = cfg
            .with_overrides(&["objective.lambda=0.5".into(), "epochs=3".into(), "precision=f64".into()])
            .unwrap();
        assert_eq!(o.objective.lambda, 0.5);
        assert_eq!(o.epochs, 3);
        assert_eq!(o.precision, Precision::F64);
        assert!(cfg.with_overrides(&["objective.lambd=1".into()]).is_err());
        assert!(cfg.with_overrides(&["nonsense".into()]).is_err());
    }

    #[test]
    fn milestones_must_precede_end() {
        let mut cfg = RunConfig::mnist(Variant::Madry);
        cfg.optimizer.milestones = vec![15];
        assert!(cfg.validate().is_err());
    }
}
