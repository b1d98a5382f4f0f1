//! Differentiable policies: an exact tabular softmax and a small MLP
//! actor-critic trained through the [`autodiff`] tape.

pub mod autodiff;
pub mod checkpoint;
pub mod mlp;
pub mod tabular;

use std::ops::{Index, Sub};

use ndarray::Array2;

use crate::error::Result;
use autodiff::{Tape, Var};

pub use checkpoint::Checkpoint;
pub use mlp::{MlpActorCritic, MlpConfig, ParamGroup};
pub use tabular::SoftmaxTabularPolicy;

/// A flat gradient aligned with a policy's declared parameter ordering.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self(self.0.iter().map(|v| v * k).collect())
    }

    /// `self += k * other`.
    pub fn add_scaled(&mut self, k: f64, other: &Self) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += k * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Index<usize> for GradientVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl Sub for &GradientVector {
    type Output = GradientVector;
    fn sub(self, rhs: &GradientVector) -> GradientVector {
        GradientVector(self.0.iter().zip(&rhs.0).map(|(a, b)| a - b).collect())
    }
}

/// A stochastic policy over a finite action set.
pub trait Policy {
    /// How a state is presented to the policy (an index or a feature vector).
    type State: ?Sized;

    fn n_actions(&self) -> usize;

    fn n_params(&self) -> usize;

    /// Log-probabilities of every action at `state`.
    fn log_probs(&self, state: &Self::State) -> Result<Vec<f64>>;

    /// `grad_theta log pi(action | state)` in the declared parameter order.
    fn score(&self, state: &Self::State, action: usize) -> Result<GradientVector>;

    fn log_prob(&self, state: &Self::State, action: usize) -> Result<f64> {
        let lp = self.log_probs(state)?;
        lp.get(action).copied().ok_or_else(|| {
            crate::Error::Index(format!("action {action} out of range 0..{}", lp.len()))
        })
    }

    fn probs(&self, state: &Self::State) -> Result<Vec<f64>> {
        Ok(self.log_probs(state)?.into_iter().map(f64::exp).collect())
    }

    /// Shannon entropy `-sum_a p log p`.
    fn entropy(&self, state: &Self::State) -> Result<f64> {
        Ok(-self
            .log_probs(state)?
            .into_iter()
            .map(|lp| if lp == f64::NEG_INFINITY { 0.0 } else { lp.exp() * lp })
            .sum::<f64>())
    }
}

/// Builds `rho = exp(log_pi - log_mu)` on the tape twice: once live and once
/// detached. Both carry identical values; only the first passes gradients.
pub fn detached_ratio(tape: &mut Tape, log_prob: Var, behavior_logprob: &Array2<f64>) -> (Var, Var) {
    let behavior = tape.constant(behavior_logprob.clone());
    let log_ratio = tape.sub(log_prob, behavior);
    let live = tape.exp(log_ratio);
    let detached = tape.detach(live);
    (live, detached)
}

/// Numerically stable log-softmax of a single logit vector.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}
