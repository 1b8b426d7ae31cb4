//! Experiment configuration: a flat JSON object with defaults for every
//! field except `dataset` and `strategy`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::datagen::{PartitionSpec, Scheme};
use crate::error::{Error, Result};
use crate::model::{LrSchedule, ModelKind, ModelSpec};
use crate::orchestrator::StrategyKind;
use crate::simenv::{DEFAULT_COMPUTE_MEANS_S, DEFAULT_COMPUTE_STD_FRACTION, DEFAULT_UPLINK_BPS};

macro_rules! defaults {
    ($($name:ident: $ty:ty = $val:expr;)*) => {
        mod default {
            #[allow(unused_imports)]
            use super::*;
            $(pub fn $name() -> $ty { $val })*
        }
    };
}

defaults! {
    synthetic_classes: usize = 10;
    synthetic_dim: usize = 32;
    synthetic_samples_per_class: usize = 200;
    synthetic_test_per_class: usize = 100;
    synthetic_separation: f64 = 3.0;
    partition_scheme: String = "iid".into();
    psi: f64 = 0.0;
    num_clients: usize = 100;
    clients_per_round: usize = 10;
    local_iters: usize = 50;
    rounds: usize = 100;
    total_budget_s: f64 = 1500.0;
    theta_min: f64 = 0.01;
    theta_probe: f64 = 0.1;
    batch_size: usize = 16;
    lr_lambda: f64 = 1.0;
    lr_tau: f64 = 50.0;
    model: String = "softmax_regression".into();
    hidden_dim: usize = 64;
    l2: f64 = 1e-4;
    eval_every: usize = 5;
    output_dir: PathBuf = PathBuf::from("runs/latest");
    compute_means_s: Vec<f64> = DEFAULT_COMPUTE_MEANS_S.to_vec();
    compute_std_fraction: f64 = DEFAULT_COMPUTE_STD_FRACTION;
    uplink_low_bps: f64 = DEFAULT_UPLINK_BPS.0;
    uplink_high_bps: f64 = DEFAULT_UPLINK_BPS.1;
    planner_knowledge: String = "oracle".into();
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `synthetic` or `idx`.
    pub dataset: String,
    #[serde(default = "default::synthetic_classes")]
    pub synthetic_classes: usize,
    #[serde(default = "default::synthetic_dim")]
    pub synthetic_dim: usize,
    #[serde(default = "default::synthetic_samples_per_class")]
    pub synthetic_samples_per_class: usize,
    /// Held out per class from the generated samples for evaluation.
    #[serde(default = "default::synthetic_test_per_class")]
    pub synthetic_test_per_class: usize,
    #[serde(default = "default::synthetic_separation")]
    pub synthetic_separation: f64,
    #[serde(default)]
    pub idx_train_images: Option<PathBuf>,
    #[serde(default)]
    pub idx_train_labels: Option<PathBuf>,
    #[serde(default)]
    pub idx_test_images: Option<PathBuf>,
    #[serde(default)]
    pub idx_test_labels: Option<PathBuf>,

    /// `iid`, `dominant_class` or `skewed_label`.
    #[serde(default = "default::partition_scheme")]
    pub partition_scheme: String,
    #[serde(default = "default::psi")]
    pub psi: f64,

    #[serde(default = "default::num_clients")]
    pub num_clients: usize,
    #[serde(default = "default::clients_per_round")]
    pub clients_per_round: usize,
    #[serde(default = "default::local_iters")]
    pub local_iters: usize,
    #[serde(default = "default::rounds")]
    pub rounds: usize,
    #[serde(default = "default::total_budget_s")]
    pub total_budget_s: f64,
    #[serde(default = "default::theta_min")]
    pub theta_min: f64,
    #[serde(default = "default::theta_probe")]
    pub theta_probe: f64,
    /// Overrides every planned ratio when set.
    #[serde(default)]
    pub force_theta: Option<f64>,
    #[serde(default = "default::batch_size")]
    pub batch_size: usize,
    #[serde(default = "default::lr_lambda")]
    pub lr_lambda: f64,
    #[serde(default = "default::lr_tau")]
    pub lr_tau: f64,

    /// `softmax_regression` or `two_layer_perceptron`.
    #[serde(default = "default::model")]
    pub model: String,
    #[serde(default = "default::hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "default::l2")]
    pub l2: f64,

    pub strategy: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default::eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub accuracy_targets: Vec<f64>,
    #[serde(default = "default::output_dir")]
    pub output_dir: PathBuf,

    /// JSON array of client profiles; replaces the generated device classes.
    #[serde(default)]
    pub profiles_path: Option<PathBuf>,
    #[serde(default = "default::compute_means_s")]
    pub compute_means_s: Vec<f64>,
    #[serde(default = "default::compute_std_fraction")]
    pub compute_std_fraction: f64,
    #[serde(default = "default::uplink_low_bps")]
    pub uplink_low_bps: f64,
    #[serde(default = "default::uplink_high_bps")]
    pub uplink_high_bps: f64,
    /// `oracle` plans with the current round's conditions, `previous_round`
    /// with the last observed ones.
    #[serde(default = "default::planner_knowledge")]
    pub planner_knowledge: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlannerKnowledge {
    Oracle,
    PreviousRound,
}

pub const DATASETS: &[&str] = &["synthetic", "idx"];
pub const PARTITION_SCHEMES: &[&str] = &["iid", "dominant_class", "skewed_label"];
pub const MODELS: &[&str] = &["softmax_regression", "two_layer_perceptron"];
pub const PLANNER_KNOWLEDGE: &[&str] = &["oracle", "previous_round"];

fn one_of(field: &str, value: &str, valid: &[&str]) -> Error {
    Error::Validation(format!(
        "{field}: unknown value {value:?}; valid values are {}",
        valid.join(", ")
    ))
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Validation(msg()))
    }
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| Error::ConfigParse(format!("line {} column {}: {e}", e.line(), e.column())))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn strategy_kind(&self) -> Result<StrategyKind> {
        StrategyKind::parse(&self.strategy).ok_or_else(|| one_of("strategy", &self.strategy, StrategyKind::NAMES))
    }

    pub fn model_spec(&self, input_dim: usize, num_classes: usize) -> Result<ModelSpec> {
        let kind = match self.model.as_str() {
            "softmax_regression" => ModelKind::SoftmaxRegression,
            "two_layer_perceptron" => ModelKind::TwoLayerPerceptron,
            other => return Err(one_of("model", other, MODELS)),
        };
        Ok(ModelSpec {
            kind,
            input_dim,
            num_classes,
            hidden_dim: if kind == ModelKind::TwoLayerPerceptron { self.hidden_dim } else { 0 },
            l2: self.l2,
        })
    }

    pub fn lr_schedule(&self) -> Result<LrSchedule> {
        LrSchedule::new(self.lr_lambda, self.lr_tau).map_err(|e| Error::Validation(e.to_string()))
    }

    pub fn partition_spec(&self, partition_seed: u64) -> Result<PartitionSpec> {
        let scheme = match self.partition_scheme.as_str() {
            "iid" => Scheme::Iid,
            "dominant_class" => Scheme::DominantClass { psi: self.psi },
            "skewed_label" => {
                check(self.psi >= 0.0 && self.psi.fract() == 0.0, || {
                    format!("psi: skewed_label needs a whole number of excluded classes, got {}", self.psi)
                })?;
                Scheme::SkewedLabel { psi: self.psi as usize }
            }
            other => return Err(one_of("partition_scheme", other, PARTITION_SCHEMES)),
        };
        Ok(PartitionSpec {
            scheme,
            seed: partition_seed,
        })
    }

    pub fn planner(&self) -> Result<PlannerKnowledge> {
        match self.planner_knowledge.as_str() {
            "oracle" => Ok(PlannerKnowledge::Oracle),
            "previous_round" => Ok(PlannerKnowledge::PreviousRound),
            other => Err(one_of("planner_knowledge", other, PLANNER_KNOWLEDGE)),
        }
    }

    /// Checks every field-level invariant. Dataset-dependent checks (class
    /// counts against `psi`) happen when the data is loaded.
    pub fn validate(&self) -> Result<()> {
        self.strategy_kind()?;
        self.model_spec(1, 1)?;
        self.lr_schedule()?;
        self.partition_spec(0)?;
        self.planner()?;
        let (n, m) = (self.num_clients, self.clients_per_round);
        check(n >= 1, || "num_clients must be >= 1".into())?;
        check(m >= 1, || "clients_per_round must be >= 1".into())?;
        check(m <= n, || format!("clients_per_round (M={m}) must satisfy M ≤ N (num_clients={n})"))?;
        check(self.local_iters >= 1, || "local_iters (H) must be >= 1".into())?;
        check(self.total_budget_s > 0.0 && self.total_budget_s.is_finite(), || {
            format!("total_budget_s must be > 0, got {}", self.total_budget_s)
        })?;
        check(self.theta_min > 0.0 && self.theta_min <= 1.0, || {
            format!("theta_min must lie in (0, 1], got {}", self.theta_min)
        })?;
        check(self.theta_probe > 0.0 && self.theta_probe <= 1.0, || {
            format!("theta_probe must lie in (0, 1], got {}", self.theta_probe)
        })?;
        if let Some(t) = self.force_theta {
            check(t > 0.0 && t <= 1.0, || format!("force_theta must lie in (0, 1], got {t}"))?;
        }
        check(self.batch_size >= 1, || "batch_size must be >= 1".into())?;
        check(self.eval_every >= 1, || "eval_every must be >= 1".into())?;
        check(self.l2 >= 0.0, || "l2 must be nonnegative".into())?;
        if self.model == "two_layer_perceptron" {
            check(self.hidden_dim >= 1, || "hidden_dim must be >= 1".into())?;
        }
        for &t in &self.accuracy_targets {
            check((0.0..=1.0).contains(&t), || format!("accuracy_targets: {t} is not in [0, 1]"))?;
        }
        if self.partition_scheme == "dominant_class" {
            check((0.0..=1.0).contains(&self.psi), || {
                format!("psi: dominant_class requires 0 ≤ ψ ≤ 1, got {}", self.psi)
            })?;
        }
        check(!self.compute_means_s.is_empty() && self.compute_means_s.iter().all(|&x| x > 0.0), || {
            "compute_means_s must be a nonempty list of positive seconds".into()
        })?;
        check(self.compute_std_fraction >= 0.0, || "compute_std_fraction must be nonnegative".into())?;
        check(self.uplink_low_bps > 0.0 && self.uplink_low_bps <= self.uplink_high_bps, || {
            "uplink range must satisfy 0 < uplink_low_bps ≤ uplink_high_bps".into()
        })?;

        match self.dataset.as_str() {
            "synthetic" => {
                check(
                    self.synthetic_classes > 0 && self.synthetic_dim > 0 && self.synthetic_samples_per_class > 0,
                    || "synthetic dataset sizes must be positive".into(),
                )?;
                check(self.synthetic_test_per_class >= 1, || "synthetic_test_per_class must be >= 1".into())?;
                check(self.synthetic_separation > 0.0, || "synthetic_separation must be > 0".into())?;
            }
            "idx" => {
                for (name, p) in [
                    ("idx_train_images", &self.idx_train_images),
                    ("idx_train_labels", &self.idx_train_labels),
                    ("idx_test_images", &self.idx_test_images),
                    ("idx_test_labels", &self.idx_test_labels),
                ] {
                    match p {
                        None => return Err(Error::Validation(format!("{name} is required for dataset \"idx\""))),
                        Some(p) if !p.exists() => {
                            return Err(Error::Validation(format!("{name}: {} does not exist", p.display())))
                        }
                        _ => {}
                    }
                }
            }
            other => return Err(one_of("dataset", other, DATASETS)),
        }
        if let Some(p) = &self.profiles_path {
            check(p.exists(), || format!("profiles_path: {} does not exist", p.display()))?;
        }
        Ok(())
    }

    /// Canonical JSON with every default filled in.
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parses `key=value`; the value is read as JSON when possible and as a
/// bare string otherwise.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::ConfigParse(format!("override {s:?} is not of the form key=value")))?;
    let key = k.trim().to_string();
    if key.is_empty() {
        return Err(Error::ConfigParse(format!("override {s:?} has an empty key")));
    }
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((key, value))
}

/// Reads a config file, applies overrides in order and validates the result.
pub fn parse_config_with(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Error::ConfigParse(format!("{}: line {} column {}: {e}", path.display(), e.line(), e.column())))?;
    let mut obj: Map<String, Value> = match value {
        Value::Object(o) => o,
        _ => return Err(Error::ConfigParse(format!("{}: top level must be a JSON object", path.display()))),
    };
    for o in overrides {
        let (k, v) = parse_override(o)?;
        obj.insert(k, v);
    }
    ExperimentConfig::from_value(Value::Object(obj))
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config_with(path, &[])
}
