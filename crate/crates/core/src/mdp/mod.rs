//! Exact, sampling-free evaluation on enumerable MDPs.

pub mod biasvar;
pub mod certificate;
pub mod gridworld;

use nalgebra::{DMatrix, DVector};

use crate::error::{domain, Error, Result};
use crate::policy::{Policy, SoftmaxTabularPolicy};

pub use biasvar::{
    default_baselines, exact_grad_stats, log_grid, pareto_sweep, write_points_csv, BiasVarPoint, GradStats,
    ParetoSweep,
};
pub use certificate::{attenuated_surrogate, attenuation_gap};
pub use gridworld::{gridworld, BehaviorCase, GridAction};

/// Largest state count solved by a direct linear solve.
const DIRECT_SOLVE_MAX_STATES: usize = 64;
const RESIDUAL_TOL: f64 = 1e-12;

/// A finite MDP with tabular dynamics and expected rewards.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactMdp {
    n_states: usize,
    n_actions: usize,
    /// `transitions[s][a]` lists `(next_state, probability)`.
    transitions: Vec<Vec<Vec<(usize, f64)>>>,
    /// Expected reward for taking `a` in `s`.
    rewards: Vec<Vec<f64>>,
    gamma: f64,
    initial_state: usize,
    absorbing: Vec<bool>,
}

impl ExactMdp {
    pub fn new(
        transitions: Vec<Vec<Vec<(usize, f64)>>>,
        rewards: Vec<Vec<f64>>,
        gamma: f64,
        initial_state: usize,
        absorbing: Vec<bool>,
    ) -> Result<Self> {
        let n_states = transitions.len();
        let n_actions = transitions.first().map_or(0, Vec::len);
        if n_states == 0 || n_actions == 0 {
            return Err(domain("MDP needs at least one state and action"));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(domain(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        if rewards.len() != n_states || absorbing.len() != n_states || initial_state >= n_states {
            return Err(domain("reward table, absorbing flags and initial state must match the state count"));
        }
        for s in 0..n_states {
            if transitions[s].len() != n_actions || rewards[s].len() != n_actions {
                return Err(domain(format!("state {s} has the wrong number of actions")));
            }
            for a in 0..n_actions {
                let row = &transitions[s][a];
                let total: f64 = row.iter().map(|(_, p)| p).sum();
                if row.iter().any(|&(t, p)| t >= n_states || !(p >= 0.0)) || (total - 1.0).abs() > 1e-12 {
                    return Err(domain(format!("transition row ({s}, {a}) is not a distribution")));
                }
                if absorbing[s]
                    && (rewards[s][a] != 0.0 || row.iter().any(|&(t, p)| t != s && p > 0.0))
                {
                    return Err(domain(format!("absorbing state {s} must self-loop with zero reward")));
                }
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            transitions,
            rewards,
            gamma,
            initial_state,
            absorbing,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    pub fn is_absorbing(&self, s: usize) -> bool {
        self.absorbing[s]
    }

    pub fn transitions(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.transitions[s][a]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s][a]
    }

    /// Copy with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(
            self.transitions.clone(),
            self.rewards.clone(),
            gamma,
            self.initial_state,
            self.absorbing.clone(),
        )
    }

    fn check_policy(&self, policy: &PolicyTable) -> Result<()> {
        if policy.n_states() != self.n_states || policy.n_actions() != self.n_actions {
            return Err(domain("policy table shape does not match the MDP"));
        }
        Ok(())
    }

    /// State-to-state transition matrix under `policy`.
    fn policy_matrix(&self, policy: &PolicyTable) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.n_states;
        let mut p = DMatrix::zeros(n, n);
        let mut r = DVector::zeros(n);
        for s in 0..n {
            for a in 0..self.n_actions {
                let pa = policy.prob(s, a);
                r[s] += pa * self.rewards[s][a];
                for &(t, q) in &self.transitions[s][a] {
                    p[(s, t)] += pa * q;
                }
            }
        }
        (p, r)
    }

    fn q_from_v(&self, v: &[f64]) -> Vec<Vec<f64>> {
        (0..self.n_states)
            .map(|s| {
                (0..self.n_actions)
                    .map(|a| {
                        if self.absorbing[s] {
                            0.0
                        } else {
                            self.rewards[s][a]
                                + self.gamma
                                    * self.transitions[s][a].iter().map(|&(t, q)| q * v[t]).sum::<f64>()
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// `max_s |V(s) - (T_pi V)(s)|`.
    pub fn bellman_residual(&self, policy: &PolicyTable, v: &[f64]) -> f64 {
        let q = self.q_from_v(v);
        (0..self.n_states)
            .map(|s| {
                let backup: f64 = (0..self.n_actions).map(|a| policy.prob(s, a) * q[s][a]).sum();
                (v[s] - backup).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// A stochastic policy given directly as per-state action probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyTable {
    probs: Vec<Vec<f64>>,
}

impl PolicyTable {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self> {
        let n_actions = probs.first().map_or(0, Vec::len);
        for (s, row) in probs.iter().enumerate() {
            let total: f64 = row.iter().sum();
            if row.len() != n_actions || row.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-12 {
                return Err(domain(format!("policy row {s} is not a distribution")));
            }
        }
        if n_actions == 0 {
            return Err(domain("policy table is empty"));
        }
        Ok(Self { probs })
    }

    pub fn from_softmax(policy: &SoftmaxTabularPolicy) -> Self {
        let probs = (0..policy.n_states())
            .map(|s| policy.probs(&s).expect("state in range"))
            .collect();
        Self { probs }
    }

    /// Convex combination `sum_k w_k * table_k`.
    pub fn mixture(components: &[(f64, &PolicyTable)]) -> Result<Self> {
        let Some((_, first)) = components.first() else {
            return Err(domain("mixture needs at least one component"));
        };
        let total: f64 = components.iter().map(|(w, _)| w).sum();
        if components.iter().any(|(w, _)| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(domain("mixture weights must be nonnegative and sum to 1"));
        }
        let mut probs = vec![vec![0.0; first.n_actions()]; first.n_states()];
        for (w, table) in components {
            if table.n_states() != first.n_states() || table.n_actions() != first.n_actions() {
                return Err(domain("mixture components differ in shape"));
            }
            for (row, src) in probs.iter_mut().zip(&table.probs) {
                for (p, q) in row.iter_mut().zip(src) {
                    *p += w * q;
                }
            }
        }
        Self::new(probs)
    }

    pub fn n_states(&self) -> usize {
        self.probs.len()
    }

    pub fn n_actions(&self) -> usize {
        self.probs[0].len()
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s][a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s]
    }
}

/// `KL(p || q)` between two categorical distributions.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

/// `max_s KL(p(.|s) || q(.|s))` over non-absorbing states.
pub fn max_kl(mdp: &ExactMdp, p: &PolicyTable, q: &PolicyTable) -> f64 {
    (0..mdp.n_states())
        .filter(|&s| !mdp.is_absorbing(s))
        .map(|s| kl_divergence(p.row(s), q.row(s)))
        .fold(0.0, f64::max)
}

/// State values, action values and advantages of a policy.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueSolution {
    pub v: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub advantage: Vec<Vec<f64>>,
    pub residual: f64,
}

/// Solves the Bellman equation of `policy`: a direct linear solve (with
/// iterative refinement) up to 64 states, value iteration beyond.
///
/// Fails if the residual `||V - T_pi V||_inf` stays above `1e-12 * max(1, ||V||_inf)`.
pub fn solve_values(mdp: &ExactMdp, policy: &PolicyTable) -> Result<ValueSolution> {
    mdp.check_policy(policy)?;
    let n = mdp.n_states();
    let v = if n <= DIRECT_SOLVE_MAX_STATES {
        direct_solve(mdp, policy)?
    } else {
        value_iteration(mdp, policy)?
    };
    let residual = mdp.bellman_residual(policy, &v);
    let scale = v.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    if !(residual < RESIDUAL_TOL * scale) {
        return Err(Error::NotConverged { residual });
    }
    let q = mdp.q_from_v(&v);
    let advantage = q
        .iter()
        .zip(&v)
        .map(|(row, vs)| row.iter().map(|qa| qa - vs).collect())
        .collect();
    Ok(ValueSolution {
        v,
        q,
        advantage,
        residual,
    })
}

fn system(mdp: &ExactMdp, policy: &PolicyTable) -> (DMatrix<f64>, DVector<f64>) {
    let n = mdp.n_states();
    let (p, mut r) = mdp.policy_matrix(policy);
    let mut a = DMatrix::identity(n, n) - p * mdp.gamma();
    for s in (0..n).filter(|&s| mdp.is_absorbing(s)) {
        a.row_mut(s).fill(0.0);
        a[(s, s)] = 1.0;
        r[s] = 0.0;
    }
    (a, r)
}

fn direct_solve(mdp: &ExactMdp, policy: &PolicyTable) -> Result<Vec<f64>> {
    let (a, r) = system(mdp, policy);
    let lu = a.clone().lu();
    let mut v = lu
        .solve(&r)
        .ok_or(Error::NotConverged { residual: f64::INFINITY })?;
    for _ in 0..3 {
        let resid = &r - &a * &v;
        if resid.amax() == 0.0 {
            break;
        }
        if let Some(dv) = lu.solve(&resid) {
            v += dv;
        }
    }
    Ok(v.iter().copied().collect())
}

fn value_iteration(mdp: &ExactMdp, policy: &PolicyTable) -> Result<Vec<f64>> {
    let (p, r) = mdp.policy_matrix(policy);
    let mut v = DVector::zeros(mdp.n_states());
    for _ in 0..1_000_000 {
        let mut next = &r + &p * &v * mdp.gamma();
        for s in (0..mdp.n_states()).filter(|&s| mdp.is_absorbing(s)) {
            next[s] = 0.0;
        }
        let change = (&next - &v).amax();
        v = next;
        if change < RESIDUAL_TOL * v.amax().max(1.0) * 0.5 {
            return Ok(v.iter().copied().collect());
        }
    }
    Err(Error::NotConverged {
        residual: mdp.bellman_residual(policy, v.as_slice()),
    })
}

/// Normalised discounted occupancy `d(s) = (1 - gamma) sum_t gamma^t Pr(s_t = s)`
/// from the initial state. Requires `gamma < 1`.
pub fn occupancy(mdp: &ExactMdp, policy: &PolicyTable) -> Result<Vec<f64>> {
    mdp.check_policy(policy)?;
    if mdp.gamma() >= 1.0 {
        return Err(domain("occupancy needs gamma < 1"));
    }
    let n = mdp.n_states();
    let (p, _) = mdp.policy_matrix(policy);
    let a = (DMatrix::identity(n, n) - p * mdp.gamma()).transpose();
    let mut e = DVector::zeros(n);
    e[mdp.initial_state()] = 1.0;
    let x = a
        .lu()
        .solve(&e)
        .ok_or(Error::NotConverged { residual: f64::INFINITY })?;
    Ok(x.iter().map(|v| (1.0 - mdp.gamma()) * v).collect())
}

/// Expected discounted return from the initial state.
pub fn expected_return(mdp: &ExactMdp, policy: &PolicyTable) -> Result<f64> {
    Ok(solve_values(mdp, policy)?.v[mdp.initial_state()])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> ExactMdp {
        gridworld(2, 2, 0.99).unwrap()
    }

    fn uniform(n: usize) -> PolicyTable {
        PolicyTable::new(vec![vec![0.25; 4]; n]).unwrap()
    }

    #[test]
    fn optimal_policy_values() {
        let mdp = grid();
        // S0 -> right -> S1 -> down -> goal
        let mut probs = vec![vec![0.0; 4]; 4];
        probs[0][GridAction::Right as usize] = 1.0;
        probs[1][GridAction::Down as usize] = 1.0;
        probs[2][GridAction::Right as usize] = 1.0;
        probs[3][0] = 1.0;
        let sol = solve_values(&mdp, &PolicyTable::new(probs).unwrap()).unwrap();
        assert!((sol.v[0] - (-1.99)).abs() < 1e-12);
        assert_eq!(sol.v[3], 0.0);
        assert!(sol.residual < 1e-12);
    }

    #[test]
    fn advantage_identity_and_residual() {
        let mdp = grid();
        let pi = PolicyTable::from_softmax(
            &SoftmaxTabularPolicy::uniform_logits(4, &[0.0, 1.0, 0.0, 1.0]).unwrap(),
        );
        let sol = solve_values(&mdp, &pi).unwrap();
        assert!(mdp.bellman_residual(&pi, &sol.v) < 1e-12);
        for s in 0..4 {
            let e: f64 = (0..4).map(|a| pi.prob(s, a) * sol.advantage[s][a]).sum();
            assert!(e.abs() < 1e-10);
        }
    }

    #[test]
    fn occupancy_matches_power_series() {
        let mdp = grid();
        let pi = uniform(4);
        let d = occupancy(&mdp, &pi).unwrap();
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        assert!(d[0] >= 1.0 - mdp.gamma());

        let (p, _) = mdp.policy_matrix(&pi);
        let mut dist = DVector::zeros(4);
        dist[0] = 1.0;
        let mut series = DVector::zeros(4);
        let mut discount = 1.0;
        while discount > 1e-14 {
            series += &dist * discount;
            dist = p.transpose() * dist;
            discount *= mdp.gamma();
        }
        for s in 0..4 {
            assert!((d[s] - (1.0 - mdp.gamma()) * series[s]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_state_occupancy() {
        let mdp = ExactMdp::new(vec![vec![vec![(0, 1.0)]]], vec![vec![1.0]], 0.9, 0, vec![false]).unwrap();
        let pi = PolicyTable::new(vec![vec![1.0]]).unwrap();
        let d = occupancy(&mdp, &pi).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-15);
        assert!((solve_values(&mdp, &pi).unwrap().v[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn large_grid_uses_value_iteration() {
        let mdp = gridworld(9, 9, 0.9).unwrap();
        let pi = uniform(81);
        let sol = solve_values(&mdp, &pi).unwrap();
        let direct = direct_solve(&mdp, &pi).unwrap();
        for (a, b) in sol.v.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_malformed_mdps() {
        assert!(ExactMdp::new(vec![vec![vec![(0, 0.5)]]], vec![vec![0.0]], 0.9, 0, vec![false]).is_err());
        assert!(ExactMdp::new(vec![vec![vec![(0, 1.0)]]], vec![vec![-1.0]], 0.9, 0, vec![true]).is_err());
        assert!(ExactMdp::new(vec![vec![vec![(0, 1.0)]]], vec![vec![0.0]], 1.5, 0, vec![false]).is_err());
        assert!(PolicyTable::new(vec![vec![0.5, 0.4]]).is_err());
    }
}
