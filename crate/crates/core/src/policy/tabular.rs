use serde::{Deserialize, Serialize};

use super::{log_softmax, GradientVector, Policy};
use crate::error::{Error, Result};

/// Per-state softmax over logits. Parameters are ordered state-major:
/// `theta[s * n_actions + a]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxTabularPolicy {
    n_actions: usize,
    logits: Vec<Vec<f64>>,
}

impl SoftmaxTabularPolicy {
    pub fn new(logits: Vec<Vec<f64>>) -> Result<Self> {
        let n_actions = logits.first().map_or(0, Vec::len);
        if n_actions == 0 {
            return Err(Error::Domain("policy needs at least one state and action".into()));
        }
        if logits.iter().any(|row| row.len() != n_actions) {
            return Err(Error::Domain("every state needs the same number of logits".into()));
        }
        if logits.iter().flatten().any(|l| !l.is_finite()) {
            return Err(Error::Domain("logits must be finite".into()));
        }
        Ok(Self { n_actions, logits })
    }

    /// The same logit vector at every state.
    pub fn uniform_logits(n_states: usize, logits: &[f64]) -> Result<Self> {
        Self::new(vec![logits.to_vec(); n_states])
    }

    pub fn n_states(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self, state: usize) -> Result<&[f64]> {
        self.logits
            .get(state)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Index(format!("state {state} out of range 0..{}", self.n_states())))
    }

    /// Score restricted to the logits of `state`: `one_hot(a) - pi(.|s)`.
    pub fn score_block(&self, state: usize, action: usize) -> Result<Vec<f64>> {
        if action >= self.n_actions {
            return Err(Error::Index(format!("action {action} out of range 0..{}", self.n_actions)));
        }
        let probs = self.probs(&state)?;
        Ok(probs
            .iter()
            .enumerate()
            .map(|(b, p)| if b == action { 1.0 - p } else { -p })
            .collect())
    }
}

impl Policy for SoftmaxTabularPolicy {
    type State = usize;

    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn n_params(&self) -> usize {
        self.n_states() * self.n_actions
    }

    fn log_probs(&self, state: &usize) -> Result<Vec<f64>> {
        Ok(log_softmax(self.logits(*state)?))
    }

    fn score(&self, state: &usize, action: usize) -> Result<GradientVector> {
        let block = self.score_block(*state, action)?;
        let mut g = GradientVector::zeros(self.n_params());
        let offset = state * self.n_actions;
        g.0[offset..offset + self.n_actions].copy_from_slice(&block);
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::E;

    #[test]
    fn reference_policy_probabilities() {
        let pi = SoftmaxTabularPolicy::uniform_logits(1, &[0.0, 1.0, 0.0, 1.0]).unwrap();
        let p = pi.probs(&0).unwrap();
        assert!((p[0] - 1.0 / (2.0 * (1.0 + E))).abs() < 1e-15);
        assert!((p[0] - 0.1345).abs() < 5e-5);
        assert!((p[1] - E / (2.0 * (1.0 + E))).abs() < 1e-15);
        assert!((p[1] - 0.3655).abs() < 5e-5);
        let h = pi.entropy(&0).unwrap();
        let direct: f64 = -p.iter().map(|q| q * q.ln()).sum::<f64>();
        assert!((h - direct).abs() < 1e-15);
        assert!(h > 0.0 && h < 4f64.ln());
    }

    #[test]
    fn uniform_policy() {
        let pi = SoftmaxTabularPolicy::uniform_logits(2, &[0.0; 4]).unwrap();
        for a in 0..4 {
            assert!((pi.log_prob(&1, a).unwrap() + 4f64.ln()).abs() < 1e-15);
            let block = pi.score_block(1, a).unwrap();
            for (b, v) in block.iter().enumerate() {
                let expect = if a == b { 0.75 } else { -0.25 };
                assert!((v - expect).abs() < 1e-15);
            }
            let full = pi.score(&1, a).unwrap();
            assert!(full.0[..4].iter().all(|v| *v == 0.0));
        }
        assert!((pi.entropy(&0).unwrap() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn near_deterministic_entropy_vanishes() {
        let pi = SoftmaxTabularPolicy::uniform_logits(1, &[60.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(pi.entropy(&0).unwrap() < 1e-20);
    }

    #[test]
    fn index_errors() {
        let pi = SoftmaxTabularPolicy::uniform_logits(2, &[0.0; 4]).unwrap();
        assert!(pi.log_prob(&2, 0).is_err());
        assert!(pi.log_prob(&0, 4).is_err());
        assert!(pi.score(&0, 9).is_err());
        assert!(SoftmaxTabularPolicy::new(vec![vec![0.0; 3], vec![0.0; 2]]).is_err());
    }

    proptest! {
        #[test]
        fn normalization_and_score_identity(logits in proptest::collection::vec(-20.0f64..20.0, 4)) {
            let pi = SoftmaxTabularPolicy::uniform_logits(1, &logits).unwrap();
            let p = pi.probs(&0).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|q| *q > 0.0));
            let mut expected = vec![0.0; 4];
            for a in 0..4 {
                let block = pi.score_block(0, a).unwrap();
                prop_assert!(block.iter().sum::<f64>().abs() < 1e-12);
                for (e, b) in expected.iter_mut().zip(&block) {
                    *e += p[a] * b;
                }
            }
            prop_assert!(expected.iter().all(|v| v.abs() < 1e-10));
        }
    }
}
