//! Experiment configuration: JSON schema, defaults and validation.
//!
//! Only `strategy`, `num_clients`, `rounds` and `dataset` are required; every
//! other field falls back to the standard experiment defaults (K = 5,
//! batch 64, initial lr 0.1, rho = 0.1, psi_max = 2, weight decay 0.001).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelKind;
use crate::strategies::{CutoffSchedule, StrategyKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `eta0 * a / (t + a)`
    InverseT,
    /// `eta0 / sqrt(t)`
    InverseSqrtT,
}

/// Learning rate for round `round` (1-based). `offset` is the `a` of the
/// inverse-t schedule.
pub fn lr_at(schedule: LrSchedule, eta0: f64, round: usize, offset: f64) -> f64 {
    let t = round.max(1) as f64;
    match schedule {
        LrSchedule::Constant => eta0,
        LrSchedule::InverseT => eta0 * offset / (t + offset),
        LrSchedule::InverseSqrtT => eta0 / t.sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AvailabilitySpec {
    /// Independent per-round participation with `p_i ~ U[p_min, 1]`.
    #[default]
    Bernoulli,
    /// 0/1 CSV matrix, rows = clients, columns = rounds.
    Trace { path: PathBuf },
    /// Every client always available except `client`, which drops out for
    /// the final `rounds` rounds.
    Stale { client: usize, rounds: usize },
}

fn default_model_kind() -> ModelKind {
    ModelKind::LogisticRegression
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_model_kind")]
    pub kind: ModelKind,
    #[serde(default = "d::hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "d::weight_decay")]
    pub weight_decay: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: default_model_kind(),
            hidden_dim: d::hidden_dim(),
            weight_decay: d::weight_decay(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        num_classes: usize,
        per_class: usize,
        input_dim: usize,
        separation: f64,
        #[serde(default = "d::test_fraction")]
        test_fraction: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Csv {
        train: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test: Option<PathBuf>,
        #[serde(default = "d::test_fraction")]
        test_fraction: f64,
    },
}

mod d {
    pub fn local_steps() -> usize {
        5
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn eta0() -> f64 {
        0.1
    }
    pub fn lr_decay_offset() -> f64 {
        100.0
    }
    pub fn rho() -> f64 {
        0.1
    }
    pub fn psi_max() -> f64 {
        2.0
    }
    pub fn p_min() -> f64 {
        0.1
    }
    pub fn classes_per_client() -> usize {
        2
    }
    pub fn test_fraction() -> f64 {
        0.2
    }
    pub fn server_lr() -> f64 {
        1.0
    }
    pub fn eval_every() -> usize {
        1
    }
    pub fn hidden_dim() -> usize {
        32
    }
    pub fn weight_decay() -> f64 {
        0.001
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub strategy: StrategyKind,
    pub num_clients: usize,
    pub rounds: usize,
    pub dataset: DatasetSpec,
    #[serde(default = "d::local_steps")]
    pub local_steps: usize,
    #[serde(default = "d::batch_size")]
    pub batch_size: usize,
    #[serde(default = "d::eta0")]
    pub eta0: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default = "d::lr_decay_offset")]
    pub lr_decay_offset: f64,
    #[serde(default = "d::rho")]
    pub rho: f64,
    #[serde(default = "d::psi_max")]
    pub psi_max: f64,
    #[serde(default)]
    pub cutoff: CutoffSchedule,
    #[serde(default = "d::p_min")]
    pub p_min: f64,
    #[serde(default)]
    pub availability: AvailabilitySpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "d::classes_per_client")]
    pub classes_per_client: usize,
    #[serde(default = "d::test_fraction")]
    pub client_test_fraction: f64,
    /// FedAvg(S) cap; `ceil(N / 2)` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample_cap: Option<usize>,
    /// Server step multiplier for FedVARP and Scaffold.
    #[serde(default = "d::server_lr")]
    pub server_lr: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d::eval_every")]
    pub eval_every: usize,
}

fn check(ok: bool, path: &str, message: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(path, message()))
    }
}

fn fraction_ok(f: f64) -> bool {
    f > 0.0 && f < 1.0
}

impl ExperimentConfig {
    /// A config with every default applied.
    pub fn new(strategy: StrategyKind, num_clients: usize, rounds: usize, dataset: DatasetSpec) -> Self {
        ExperimentConfig {
            strategy,
            num_clients,
            rounds,
            dataset,
            local_steps: d::local_steps(),
            batch_size: d::batch_size(),
            eta0: d::eta0(),
            lr_schedule: LrSchedule::default(),
            lr_decay_offset: d::lr_decay_offset(),
            rho: d::rho(),
            psi_max: d::psi_max(),
            cutoff: CutoffSchedule::default(),
            p_min: d::p_min(),
            availability: AvailabilitySpec::default(),
            model: ModelConfig::default(),
            classes_per_client: d::classes_per_client(),
            client_test_fraction: d::test_fraction(),
            subsample_cap: None,
            server_lr: d::server_lr(),
            seed: 0,
            eval_every: d::eval_every(),
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { String::new() } else { path }, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        Self::from_json_str(&value.to_string())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn lr(&self, round: usize) -> f64 {
        lr_at(self.lr_schedule, self.eta0, round, self.lr_decay_offset)
    }

    pub fn effective_subsample_cap(&self) -> usize {
        self.subsample_cap.unwrap_or(self.num_clients.div_ceil(2))
    }

    pub fn validate(&self) -> Result<()> {
        check(self.num_clients >= 1, "num_clients", || "must be at least 1".into())?;
        check(self.rounds >= 1, "rounds", || "T must be at least 1".into())?;
        check(self.local_steps >= 1, "local_steps", || "K must be at least 1".into())?;
        check(self.batch_size >= 1, "batch_size", || "must be at least 1".into())?;
        check(self.eta0 >= 0.0 && self.eta0.is_finite(), "eta0", || {
            format!("{} must be a nonnegative number", self.eta0)
        })?;
        check(
            self.lr_decay_offset > 0.0 && self.lr_decay_offset.is_finite(),
            "lr_decay_offset",
            || "must be positive".into(),
        )?;
        check((0.0..=1.0).contains(&self.rho), "rho", || {
            format!("rho = {} is outside [0, 1]", self.rho)
        })?;
        check(self.psi_max >= 1.0 && self.psi_max.is_finite(), "psi_max", || {
            format!("{} must be at least 1", self.psi_max)
        })?;
        if let Err((path, message)) = self.cutoff.validate() {
            return Err(Error::config(path, message));
        }
        check(self.p_min > 0.0 && self.p_min <= 1.0, "p_min", || {
            format!("{} is not in (0, 1]", self.p_min)
        })?;
        check(self.classes_per_client >= 1, "classes_per_client", || "must be at least 1".into())?;
        check(fraction_ok(self.client_test_fraction), "client_test_fraction", || {
            format!("{} is not in (0, 1)", self.client_test_fraction)
        })?;
        if let Some(cap) = self.subsample_cap {
            check(cap >= 1, "subsample_cap", || "must be at least 1".into())?;
        }
        check(self.server_lr > 0.0 && self.server_lr.is_finite(), "server_lr", || {
            "must be positive".into()
        })?;
        check(self.eval_every >= 1, "eval_every", || "must be at least 1".into())?;
        check(self.model.weight_decay >= 0.0 && self.model.weight_decay.is_finite(), "model.weight_decay", || {
            "must be a nonnegative number".into()
        })?;
        check(self.model.hidden_dim >= 1, "model.hidden_dim", || "must be at least 1".into())?;
        match &self.dataset {
            DatasetSpec::Synthetic {
                num_classes,
                per_class,
                input_dim,
                separation,
                test_fraction,
            } => {
                check(*num_classes >= 2, "dataset.num_classes", || "must be at least 2".into())?;
                check(*per_class >= 1, "dataset.per_class", || "must be at least 1".into())?;
                check(*input_dim >= 1, "dataset.input_dim", || "must be at least 1".into())?;
                check(*separation >= 0.0 && separation.is_finite(), "dataset.separation", || {
                    "must be a nonnegative number".into()
                })?;
                check(fraction_ok(*test_fraction), "dataset.test_fraction", || {
                    format!("{test_fraction} is not in (0, 1)")
                })?;
            }
            DatasetSpec::Csv { test_fraction, .. } => {
                check(fraction_ok(*test_fraction), "dataset.test_fraction", || {
                    format!("{test_fraction} is not in (0, 1)")
                })?;
            }
            DatasetSpec::Idx { .. } => {}
        }
        if let AvailabilitySpec::Stale { client, rounds } = self.availability {
            check(client < self.num_clients, "availability.client", || {
                format!("client {client} out of range for {} clients", self.num_clients)
            })?;
            check(rounds <= self.rounds, "availability.rounds", || {
                format!("{rounds} stale rounds exceed {} total rounds", self.rounds)
            })?;
        }
        if self.psi_max > 2.0 {
            log::warn!("psi_max = {} exceeds 2; the convergence guarantee no longer applies", self.psi_max);
        }
        Ok(())
    }
}
