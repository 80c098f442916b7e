//! Run configuration: one flat `name = value` table per section.
//!
//! Defaults reproduce the multi-goal setting (α = 2.5, τ = 0.0005,
//! β = 0.001, γ = 0.9, 4000 steps). A config file only needs the keys it
//! changes; [`RunConfig::to_toml`] writes the fully resolved form.

use serde::{Deserialize, Serialize};

use crate::error::{MeowError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingKind {
    Additive,
    Affine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvName {
    Multigoal,
    Onestep,
}

impl EnvName {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvName::Multigoal => "multigoal",
            EnvName::Onestep => "onestep",
        }
    }
}

impl std::str::FromStr for EnvName {
    type Err = MeowError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multigoal" => Ok(EnvName::Multigoal),
            "onestep" => Ok(EnvName::Onestep),
            other => Err(MeowError::Config(format!("unknown environment {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Temperature α.
    pub alpha: f64,
    pub coupling: CouplingKind,
    pub coupling_layers: usize,
    /// Width of the hypernetwork hidden layers.
    pub hyper_hidden: usize,
    pub hyper_layers: usize,
    /// Hidden width of the per-sample conditioner inside each coupling layer.
    pub conditioner_hidden: usize,
    /// Dropout rate inside the coupling-layer hypernetworks.
    pub dropout: f64,
    pub shift_hidden: usize,
    pub shift_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            alpha: 2.5,
            coupling: CouplingKind::Additive,
            coupling_layers: 4,
            hyper_hidden: 64,
            hyper_layers: 2,
            conditioner_hidden: 16,
            dropout: 0.1,
            shift_hidden: 256,
            shift_layers: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(MeowError::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(MeowError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.hyper_hidden == 0 || self.conditioner_hidden == 0 || self.shift_hidden == 0 {
            return Err(MeowError::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub name: EnvName,
    /// Episode length; the episode is truncated (not terminated) here.
    pub horizon: usize,
    /// Standard deviation of the initial-state noise around the origin.
    pub init_sigma: f64,
    /// Displacement produced by a unit action (multi-goal only).
    pub action_scale: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            name: EnvName::Multigoal,
            horizon: 30,
            init_sigma: 0.1,
            action_scale: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// Environment steps, one gradient update each (after warm-up).
    pub steps: usize,
    pub gamma: f64,
    /// Polyak smoothing factor τ.
    pub tau: f64,
    /// Adam learning rate β.
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Steps of uniform random actions before updates begin.
    pub warmup_steps: usize,
    /// Steps between metric rows (and evaluations).
    pub metrics_interval: usize,
    /// At the first update, move both shift heads so that the batch-mean
    /// shifted Q already sits at the fixed point of the bootstrapped target.
    pub fit_shift_init: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            gamma: 0.9,
            tau: 0.0005,
            learning_rate: 0.001,
            grad_clip: 30.0,
            batch_size: 256,
            buffer_capacity: 1_000_000,
            warmup_steps: 1000,
            metrics_interval: 100,
            fit_shift_init: true,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(MeowError::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(MeowError::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 || self.metrics_interval == 0 {
            return Err(MeowError::Config(
                "batch_size, buffer_capacity and metrics_interval must be positive".into(),
            ));
        }
        if !(self.grad_clip > 0.0) || !(self.learning_rate >= 0.0) {
            return Err(MeowError::Config(
                "grad_clip must be positive and learning_rate non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// How evaluation rollouts pick actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionMode {
    Stochastic,
    Deterministic,
}

impl std::str::FromStr for ActionMode {
    type Err = MeowError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stochastic" => Ok(ActionMode::Stochastic),
            "deterministic" => Ok(ActionMode::Deterministic),
            other => Err(MeowError::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub mode: ActionMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 20,
            mode: ActionMode::Deterministic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| MeowError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MeowError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.trainer.validate()?;
        if self.eval.episodes == 0 {
            return Err(MeowError::Config("eval.episodes must be at least 1".into()));
        }
        if self.eval.mode == ActionMode::Deterministic && self.model.coupling == CouplingKind::Affine {
            return Err(MeowError::Config(
                "deterministic evaluation needs additive coupling layers".into(),
            ));
        }
        if self.env.horizon == 0 {
            return Err(MeowError::Config("horizon must be at least 1".into()));
        }
        if !(self.env.init_sigma >= 0.0) || !(self.env.action_scale > 0.0) {
            return Err(MeowError::Config("init_sigma must be >= 0 and action_scale > 0".into()));
        }
        Ok(())
    }
}
