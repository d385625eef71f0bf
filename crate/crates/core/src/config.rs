//! Run configuration. Every struct deserializes with defaults for missing
//! fields and rejects unknown ones.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::SplitFractions;
use crate::error::{Error, Result};
use crate::synthetic::GeneratorSpec;

/// Which embedding pathways feed the patient encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Convex gate between ontology and co-occurrence embeddings.
    #[default]
    Full,
    /// Co-occurrence embeddings only.
    NoHie,
    /// Ontology embeddings only.
    NoCo,
    /// Plain average of the two pathways.
    NoFus,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoHie, Variant::NoCo, Variant::NoFus];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoHie => "no_hie",
            Variant::NoCo => "no_co",
            Variant::NoFus => "no_fus",
        }
    }

    pub fn uses_hierarchy(self) -> bool {
        self != Variant::NoHie
    }

    pub fn uses_cooccurrence(self) -> bool {
        self != Variant::NoCo
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (full, no_hie, no_co, no_fus)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub layers: usize,
    /// Softmax temperature τ.
    pub tau: f64,
    /// Concrete temperature β.
    pub beta: f64,
    /// Prior strength on scores η.
    pub eta: f64,
    /// Prior strength on gates γ.
    pub gamma: f64,
    pub init_log_kappa: f64,
    pub leaky_slope: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            layers: 2,
            tau: 1.0,
            beta: 2.0 / 3.0,
            eta: 1.0,
            gamma: 1.0,
            init_log_kappa: 2.0,
            leaky_slope: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub bce: f64,
    pub margin: f64,
    pub hyp: f64,
    pub sparse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            bce: 0.99,
            margin: 0.04,
            hyp: 0.01,
            sparse: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("bce", self.bce),
            ("margin", self.margin),
            ("hyp", self.hyp),
            ("sparse", self.sparse),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss.{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub dim: usize,
    pub variant: Variant,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Patients per optimization step.
    pub batch_patients: usize,
    pub split: SplitFractions,
    pub attention: AttentionConfig,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 42,
            dim: 64,
            variant: Variant::Full,
            learning_rate: 1e-2,
            max_epochs: 200,
            patience: 30,
            batch_patients: 16,
            split: SplitFractions::default(),
            attention: AttentionConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.attention;
        let checks = [
            (self.dim >= 1, "dim must be at least 1"),
            (
                self.learning_rate.is_finite() && self.learning_rate > 0.0,
                "learning_rate must be > 0",
            ),
            (self.max_epochs >= 1, "max_epochs must be at least 1"),
            (self.patience <= self.max_epochs, "patience must not exceed max_epochs"),
            (self.batch_patients >= 1, "batch_patients must be at least 1"),
            (a.layers >= 1, "attention.layers must be at least 1"),
            (a.tau.is_finite() && a.tau > 0.0, "attention.tau must be > 0"),
            (a.beta.is_finite() && a.beta > 0.0, "attention.beta must be > 0"),
            (a.eta.is_finite() && a.eta >= 0.0, "attention.eta must be >= 0"),
            (a.gamma.is_finite() && a.gamma >= 0.0, "attention.gamma must be >= 0"),
            (a.init_log_kappa.is_finite(), "attention.init_log_kappa must be finite"),
            (a.leaky_slope.is_finite(), "attention.leaky_slope must be finite"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Binarization threshold for predicted probabilities.
    pub threshold: f64,
    /// Prior weight at or above which an edge counts as strong.
    pub strong_prior: f64,
    /// Minimum a(s → target) for a code to be masked in the unseen setting.
    pub unseen_forward: f64,
    /// Minimum a(target → s) for a code to be masked in the unseen setting.
    pub unseen_reverse: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: 0.5,
            strong_prior: 0.5,
            unseen_forward: 0.5,
            unseen_reverse: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub ontology: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub generator: GeneratorSpec,
    pub eval: EvalConfig,
    pub paths: Paths,
    pub target_med: Option<String>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            generator: GeneratorSpec::default(),
            eval: EvalConfig::default(),
            paths: Paths::default(),
            target_med: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Sets the single seed that drives generation and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.generator.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.generator.validate()?;
        let e = &self.eval;
        for (name, v) in [
            ("threshold", e.threshold),
            ("strong_prior", e.strong_prior),
            ("unseen_forward", e.unseen_forward),
            ("unseen_reverse", e.unseen_reverse),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("eval.{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}
