use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filters::hash::fmix64;
use crate::filters::{FilterConfig, FilterLayout};
use crate::model::{DatasetKind, DatasetSpec, ModelSpec, TrainConfig};

/// A config value that fails validation, named by its dotted key.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{key}: {message}")]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    fn new(key: &str, message: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            message: message.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub federation: FederationConfig,
    pub training: TrainConfig,
    pub probe: TrainConfig,
    pub kappa: KappaConfig,
    pub codec: CodecConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            federation: FederationConfig::default(),
            training: TrainConfig::default(),
            probe: TrainConfig {
                epochs: 1,
                lr: 0.01,
                batch_size: 64,
            },
            kappa: KappaConfig::default(),
            codec: CodecConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub clients: usize,
    pub participation: f64,
    pub rounds: usize,
    /// Dirichlet concentration `a` of the class split.
    pub dirichlet: f64,
    pub lambda0: f64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            clients: 8,
            participation: 1.0,
            rounds: 40,
            dirichlet: 10.0,
            lambda0: 1.0,
        }
    }
}

impl FederationConfig {
    /// Clients per round, `ceil(ρ N)`.
    pub fn clients_per_round(&self) -> usize {
        ((self.participation * self.clients as f64) - 1e-9)
            .ceil()
            .max(0.0) as usize
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KappaMode {
    #[default]
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KappaConfig {
    pub start: f64,
    pub end: f64,
    pub mode: KappaMode,
}

impl Default for KappaConfig {
    fn default() -> Self {
        Self {
            start: 0.8,
            end: 1.0,
            mode: KappaMode::Cosine,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodecMode {
    /// Top-κ delta through a filter, DEFLATE-compressed.
    #[default]
    Filter,
    /// The whole client mask as raw bits.
    Dense,
    /// Top-κ delta handed to the server directly, billed as 32-bit indices.
    Bypass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub mode: CodecMode,
    pub layout: FilterLayout,
    pub arity: u8,
    pub bits_per_entry: u8,
}

impl Default for CodecConfig {
    fn default() -> Self {
        let f = FilterConfig::default();
        Self {
            mode: CodecMode::Filter,
            layout: f.layout,
            arity: f.arity,
            bits_per_entry: f.bits_per_entry,
        }
    }
}

impl CodecConfig {
    pub fn filter(&self) -> FilterConfig {
        FilterConfig {
            layout: self.layout,
            arity: self.arity,
            bits_per_entry: self.bits_per_entry,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Widths of the maskable hidden layers.
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DatasetKind,
    pub classes: usize,
    pub dim: usize,
    /// Training examples, split across the clients.
    pub samples: usize,
    pub test_samples: usize,
    pub noise: f64,
    pub blobs_per_class: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let spec = DatasetSpec::default();
        Self {
            kind: spec.kind,
            classes: spec.classes,
            dim: spec.dim,
            samples: 64_000,
            test_samples: 4_000,
            noise: 0.2,
            blobs_per_class: spec.blobs_per_class,
            seed: spec.seed,
        }
    }
}

impl DataConfig {
    pub fn train_spec(&self) -> DatasetSpec {
        DatasetSpec {
            kind: self.kind,
            classes: self.classes,
            dim: self.dim,
            samples: self.samples,
            noise: self.noise,
            blobs_per_class: self.blobs_per_class,
            seed: self.seed,
        }
    }

    /// Same distribution, independent draw.
    pub fn test_spec(&self) -> DatasetSpec {
        DatasetSpec {
            samples: self.test_samples,
            seed: fmix64(self.seed ^ TEST_SEED_SALT),
            ..self.train_spec()
        }
    }
}

const TEST_SEED_SALT: u64 = 0x7465_7374_7365_7421;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// A mask sampled from the global probabilities with a seeded stream.
    #[default]
    Sampled,
    /// Keep exactly the weights with `θ ≥ 0.5`.
    Thresholded,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mode: EvalMode,
}

impl ExperimentConfig {
    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            input_dim: self.data.dim,
            hidden: self.model.hidden.clone(),
            classes: self.data.classes,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let f = &self.federation;
        if f.clients == 0 {
            return Err(ConfigError::new("federation.clients", "must be at least 1"));
        }
        if !(f.participation > 0.0 && f.participation <= 1.0) {
            return Err(ConfigError::new(
                "federation.participation",
                format!("must lie in (0, 1], got {}", f.participation),
            ));
        }
        let k = f.clients_per_round();
        if k < 1 || k > f.clients {
            return Err(ConfigError::new(
                "federation.participation",
                "ceil(participation * clients) must be in [1, clients]",
            ));
        }
        if !(f.dirichlet.is_finite() && f.dirichlet > 0.0) {
            return Err(ConfigError::new(
                "federation.dirichlet",
                format!("must be positive, got {}", f.dirichlet),
            ));
        }
        if !(f.lambda0.is_finite() && f.lambda0 > 0.0) {
            return Err(ConfigError::new(
                "federation.lambda0",
                format!("must be positive, got {}", f.lambda0),
            ));
        }
        for (section, t) in [("training", &self.training), ("probe", &self.probe)] {
            if t.batch_size == 0 {
                return Err(ConfigError::new(
                    &format!("{section}.batch_size"),
                    "must be at least 1",
                ));
            }
            if !(t.lr.is_finite() && t.lr >= 0.0) {
                return Err(ConfigError::new(
                    &format!("{section}.lr"),
                    format!("must be finite and non-negative, got {}", t.lr),
                ));
            }
        }
        if self.training.epochs == 0 {
            return Err(ConfigError::new("training.epochs", "must be at least 1"));
        }
        for (key, v) in [
            ("kappa.start", self.kappa.start),
            ("kappa.end", self.kappa.end),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(ConfigError::new(
                    key,
                    format!("must lie in (0, 1], got {v}"),
                ));
            }
        }
        if let Err(e) = self.codec.filter().validate() {
            return Err(ConfigError::new("codec", e.to_string()));
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(ConfigError::new(
                "model.hidden",
                "needs at least one layer, all widths positive",
            ));
        }
        let d = &self.data;
        if d.classes < 2 {
            return Err(ConfigError::new("data.classes", "must be at least 2"));
        }
        if d.dim < 2 {
            return Err(ConfigError::new("data.dim", "must be at least 2"));
        }
        if d.blobs_per_class == 0 {
            return Err(ConfigError::new(
                "data.blobs_per_class",
                "must be at least 1",
            ));
        }
        if !(d.noise.is_finite() && d.noise >= 0.0) {
            return Err(ConfigError::new(
                "data.noise",
                "must be finite and non-negative",
            ));
        }
        if d.samples < f.clients {
            return Err(ConfigError::new(
                "data.samples",
                format!("{} samples cannot cover {} clients", d.samples, f.clients),
            ));
        }
        if self.data.test_samples == 0 {
            return Err(ConfigError::new("data.test_samples", "must be at least 1"));
        }
        Ok(())
    }
}
