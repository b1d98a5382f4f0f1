//! Regime, learner and environment configuration.

use serde::{Deserialize, Serialize};

use crate::diagnostics::UtilizationThresholds;
use crate::error::{domain, Result};
use crate::registry::Params;
use crate::replay::DEFAULT_CAPACITY;
use crate::surrogate::SurrogateKind;
use crate::targets::TargetSpec;

/// How actors and the learner are interleaved.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerMode {
    /// Each round every actor rolls one segment in index order, then the
    /// learner performs `updates_per_round` updates. Bit-reproducible.
    #[default]
    Interleaved,
    /// Actors run on their own threads and the learner on the caller's.
    Threaded,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Uniform with replacement over the buffer contents.
    #[default]
    Uniform,
}

/// Data-collection regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeConfig {
    pub num_actors: usize,
    /// Maximum rollout segment length `T`.
    pub segment_len: usize,
    #[serde(default = "default_capacity")]
    pub capacity: usize,
    /// Version-gap threshold for the stale subset.
    pub t_old: u64,
    #[serde(default)]
    pub sampling: SamplingMode,
    #[serde(default)]
    pub scheduler: SchedulerMode,
    /// Learner updates per scheduling round (interleaved mode).
    #[serde(default = "one")]
    pub updates_per_round: usize,
    /// Updates to wait until the buffer holds at least this many transitions.
    #[serde(default)]
    pub warmup_transitions: usize,
}

fn default_capacity() -> usize {
    DEFAULT_CAPACITY
}

fn one() -> usize {
    1
}

impl RegimeConfig {
    /// Toy-scale fresh regime: many actors keep the buffer young.
    pub fn fresh_toy() -> Self {
        Self {
            num_actors: 16,
            segment_len: 8,
            capacity: 4096,
            t_old: 256,
            sampling: SamplingMode::Uniform,
            scheduler: SchedulerMode::Interleaved,
            updates_per_round: 4,
            warmup_transitions: 256,
        }
    }

    /// Toy-scale stale regime: two actors at the same learner throughput.
    pub fn stale_toy() -> Self {
        Self {
            num_actors: 2,
            ..Self::fresh_toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_actors == 0 {
            return Err(domain("num_actors must be at least 1"));
        }
        if self.segment_len == 0 || self.capacity == 0 || self.updates_per_round == 0 {
            return Err(domain("segment_len, capacity and updates_per_round must be positive"));
        }
        if self.segment_len > self.capacity {
            return Err(domain("segment_len cannot exceed the replay capacity"));
        }
        if self.warmup_transitions > self.capacity {
            return Err(domain("warmup_transitions cannot exceed the replay capacity"));
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "adam_eps")]
    pub eps: f64,
    #[serde(default = "weight_decay")]
    pub weight_decay: f64,
    /// Global gradient-norm clip; off when absent.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}
fn weight_decay() -> f64 {
    0.01
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
            weight_decay: weight_decay(),
            max_grad_norm: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(domain("optimizer needs betas in [0, 1), eps > 0 and weight_decay >= 0"));
        }
        if self.max_grad_norm.is_some_and(|n| !(n > 0.0)) {
            return Err(domain("max_grad_norm must be positive"));
        }
        Ok(())
    }
}

/// Learner hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerConfig {
    pub surrogate: SurrogateKind,
    #[serde(default = "gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub target: TargetSpec,
    #[serde(default = "value_coef")]
    pub value_coef: f64,
    #[serde(default = "entropy_coef")]
    pub entropy_coef: f64,
    #[serde(default = "policy_lr")]
    pub policy_lr: f64,
    #[serde(default = "value_lr")]
    pub value_lr: f64,
    pub batch_size: usize,
    /// Number of learner updates in a run.
    pub iterations: u64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub normalize_advantages: bool,
    #[serde(default = "hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub thresholds: UtilizationThresholds,
}

fn gamma() -> f64 {
    0.99
}
fn value_coef() -> f64 {
    0.5
}
fn entropy_coef() -> f64 {
    0.0
}
fn policy_lr() -> f64 {
    3e-6
}
fn value_lr() -> f64 {
    3e-5
}
fn hidden() -> Vec<usize> {
    vec![64, 64]
}

impl LearnerConfig {
    /// Defaults for everything except the required fields.
    pub fn new(surrogate: SurrogateKind, batch_size: usize, iterations: u64) -> Self {
        Self {
            surrogate,
            gamma: gamma(),
            target: TargetSpec::default(),
            value_coef: value_coef(),
            entropy_coef: entropy_coef(),
            policy_lr: policy_lr(),
            value_lr: value_lr(),
            batch_size,
            iterations,
            optimizer: OptimizerConfig::default(),
            normalize_advantages: false,
            hidden: hidden(),
            thresholds: UtilizationThresholds::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.surrogate.build()?;
        self.target.build()?;
        self.optimizer.validate()?;
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(domain(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !(self.policy_lr > 0.0) || !(self.value_lr > 0.0) {
            return Err(domain("learning rates must be positive"));
        }
        if !(self.value_coef >= 0.0) || !(self.entropy_coef >= 0.0) {
            return Err(domain("loss weights must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(domain("batch_size must be positive"));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(domain("hidden layer widths must be positive"));
        }
        Ok(())
    }
}

/// Named environment plus parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: String,
    #[serde(flatten)]
    pub params: Params,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self {
            kind: "gridworld".into(),
            params: Params::new(),
        }
    }
}
