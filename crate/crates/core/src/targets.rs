//! Advantage and value-target construction.
//!
//! Both estimators work on one trajectory segment plus state values
//! `V(s_0), ..., V(s_n)` where the last entry is the bootstrap value for the
//! state after the segment (forced to zero when the segment ends in a true
//! terminal).

use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::registry::{Params, Registry};

/// The per-step quantities the estimators need from a segment.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySegment {
    pub rewards: Vec<f64>,
    pub behavior_logprobs: Vec<f64>,
    /// The final transition entered an absorbing state.
    pub terminal: bool,
}

impl TrajectorySegment {
    pub fn new(rewards: Vec<f64>, behavior_logprobs: Vec<f64>, terminal: bool) -> Result<Self> {
        if rewards.is_empty() {
            return Err(domain("segment must be nonempty"));
        }
        if behavior_logprobs.len() != rewards.len() {
            return Err(Error::LengthMismatch {
                what: "behavior log-probs",
                expected: rewards.len(),
                got: behavior_logprobs.len(),
            });
        }
        Ok(Self {
            rewards,
            behavior_logprobs,
            terminal,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    fn check_values(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() + 1 {
            return Err(Error::LengthMismatch {
                what: "values (segment length + 1)",
                expected: self.len() + 1,
                got: values.len(),
            });
        }
        Ok(())
    }

    fn bootstrap(&self, values: &[f64]) -> f64 {
        if self.terminal {
            0.0
        } else {
            values[self.len()]
        }
    }
}

/// Per-step advantages and value targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSet {
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
}

/// Generalized advantage estimation, computed by the backward recursion
/// `A_t = delta_t + gamma * lambda * A_{t+1}`.
pub fn gae(segment: &TrajectorySegment, values: &[f64], gamma: f64, lambda: f64) -> Result<TargetSet> {
    segment.check_values(values)?;
    let n = segment.len();
    let next_value = |t: usize| if t + 1 == n { segment.bootstrap(values) } else { values[t + 1] };
    let mut advantages = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let delta = segment.rewards[t] + gamma * next_value(t) - values[t];
        running = delta + gamma * lambda * running;
        advantages[t] = running;
    }
    let value_targets = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok(TargetSet {
        advantages,
        value_targets,
    })
}

/// V-trace targets with truncation levels `rho_bar >= c_bar > 0`.
///
/// Value targets follow `v_s - V(s) = rho_bar_s delta_s + gamma c_s (v_{s+1} - V(s+1))`;
/// advantages are `rho_bar_s (r_s + gamma v_{s+1} - V(s))`.
pub fn vtrace(
    segment: &TrajectorySegment,
    values: &[f64],
    target_logprobs: &[f64],
    gamma: f64,
    rho_bar: f64,
    c_bar: f64,
) -> Result<TargetSet> {
    segment.check_values(values)?;
    if target_logprobs.len() != segment.len() {
        return Err(Error::LengthMismatch {
            what: "target log-probs",
            expected: segment.len(),
            got: target_logprobs.len(),
        });
    }
    if !(c_bar > 0.0 && rho_bar >= c_bar) {
        return Err(domain(format!(
            "v-trace needs rho_bar >= c_bar > 0, got rho_bar={rho_bar}, c_bar={c_bar}"
        )));
    }
    let n = segment.len();
    let bootstrap = segment.bootstrap(values);
    let next_value = |t: usize| if t + 1 == n { bootstrap } else { values[t + 1] };
    let ratios: Vec<f64> = target_logprobs
        .iter()
        .zip(&segment.behavior_logprobs)
        .map(|(t, b)| (t - b).exp())
        .collect();

    let mut value_targets = vec![0.0; n];
    let mut correction = 0.0; // v_{s+1} - V(s+1)
    for t in (0..n).rev() {
        let rho = ratios[t].min(rho_bar);
        let c = ratios[t].min(c_bar);
        let delta = segment.rewards[t] + gamma * next_value(t) - values[t];
        correction = rho * delta + gamma * c * correction;
        value_targets[t] = values[t] + correction;
    }
    let advantages = (0..n)
        .map(|t| {
            let next_target = if t + 1 == n { bootstrap } else { value_targets[t + 1] };
            ratios[t].min(rho_bar) * (segment.rewards[t] + gamma * next_target - values[t])
        })
        .collect();
    Ok(TargetSet {
        advantages,
        value_targets,
    })
}

/// A target-construction scheme.
pub trait TargetEstimator: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    /// `target_logprobs` are `log pi(a_t | s_t)` under the current learner policy.
    fn estimate(
        &self,
        segment: &TrajectorySegment,
        values: &[f64],
        target_logprobs: &[f64],
        gamma: f64,
    ) -> Result<TargetSet>;
}

#[derive(Clone, Copy, Debug)]
pub struct Gae {
    pub lambda: f64,
}

impl TargetEstimator for Gae {
    fn name(&self) -> &'static str {
        "gae"
    }

    fn estimate(&self, segment: &TrajectorySegment, values: &[f64], _: &[f64], gamma: f64) -> Result<TargetSet> {
        gae(segment, values, gamma, self.lambda)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VTrace {
    pub rho_bar: f64,
    pub c_bar: f64,
}

impl TargetEstimator for VTrace {
    fn name(&self) -> &'static str {
        "vtrace"
    }

    fn estimate(
        &self,
        segment: &TrajectorySegment,
        values: &[f64],
        target_logprobs: &[f64],
        gamma: f64,
    ) -> Result<TargetSet> {
        vtrace(segment, values, target_logprobs, gamma, self.rho_bar, self.c_bar)
    }
}

/// Named target scheme plus parameters, as it appears in configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub kind: String,
    #[serde(flatten)]
    pub params: Params,
}

impl Default for TargetSpec {
    fn default() -> Self {
        Self {
            kind: "gae".into(),
            params: Params::from([("lambda".to_string(), 0.95)]),
        }
    }
}

impl TargetSpec {
    pub fn build(&self) -> Result<Box<dyn TargetEstimator>> {
        registry().build(&self.kind, &self.params)
    }
}

pub fn registry() -> &'static Registry<dyn TargetEstimator> {
    static REGISTRY: OnceLock<Registry<dyn TargetEstimator>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut r: Registry<dyn TargetEstimator> = Registry::new("target scheme");
        r.register("gae", "generalized advantage estimation (lambda)", |p| {
            let lambda = p.get_or("lambda", 0.95);
            if !(0.0..=1.0).contains(&lambda) {
                return Err(domain(format!("lambda must lie in [0, 1], got {lambda}")));
            }
            Ok(Box::new(Gae { lambda }))
        })
        .register("vtrace", "truncated per-decision importance targets (rho_bar, c_bar)", |p| {
            let rho_bar = p.get_or("rho_bar", 1.0);
            let c_bar = p.get_or("c_bar", 1.0);
            if !(c_bar > 0.0 && rho_bar >= c_bar) {
                return Err(domain("v-trace needs rho_bar >= c_bar > 0"));
            }
            Ok(Box::new(VTrace { rho_bar, c_bar }))
        });
        r
    })
}
