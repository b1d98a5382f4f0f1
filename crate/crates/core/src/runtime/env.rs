//! Toy environments for the actor-learner pipeline.

use std::fmt;
use std::sync::OnceLock;

use rand::{Rng, RngCore};

use super::config::EnvSpec;
use crate::error::{domain, Error, Result};
use crate::mdp::{gridworld, ExactMdp};
use crate::registry::Registry;

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub obs: Vec<f64>,
    pub reward: f64,
    /// Entered an absorbing state.
    pub terminated: bool,
    /// Hit the step limit without terminating.
    pub truncated: bool,
}

/// An enumerable model of an environment: the MDP plus the observation
/// emitted in each state.
#[derive(Clone, Debug)]
pub struct ExactModel {
    pub mdp: ExactMdp,
    pub observations: Vec<Vec<f64>>,
}

pub trait Env: Send + fmt::Debug {
    fn name(&self) -> &'static str;

    fn obs_dim(&self) -> usize;

    fn n_actions(&self) -> usize;

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64>;

    fn step(&mut self, action: usize, rng: &mut dyn RngCore) -> Result<StepOutcome>;

    /// Exact model for noise-free evaluation, when one exists.
    fn exact_model(&self) -> Option<ExactModel> {
        None
    }
}

/// Simulates a finite MDP with one-hot observations and a step limit.
#[derive(Clone, Debug)]
pub struct MdpEnv {
    name: &'static str,
    mdp: ExactMdp,
    max_steps: usize,
    state: usize,
    steps: usize,
}

impl MdpEnv {
    /// `slip` is the probability that the chosen action is replaced by a
    /// uniformly random one; it is folded into the transition table.
    pub fn new(name: &'static str, mdp: ExactMdp, max_steps: usize, slip: f64) -> Result<Self> {
        if max_steps == 0 {
            return Err(domain("max_steps must be positive"));
        }
        if !(0.0..=1.0).contains(&slip) {
            return Err(domain(format!("slip must lie in [0, 1], got {slip}")));
        }
        let mdp = if slip > 0.0 { with_slip(&mdp, slip)? } else { mdp };
        let state = mdp.initial_state();
        Ok(Self {
            name,
            mdp,
            max_steps,
            state,
            steps: 0,
        })
    }

    pub fn mdp(&self) -> &ExactMdp {
        &self.mdp
    }

    fn one_hot(&self, s: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.mdp.n_states()];
        v[s] = 1.0;
        v
    }
}

fn with_slip(mdp: &ExactMdp, slip: f64) -> Result<ExactMdp> {
    let (n_s, n_a) = (mdp.n_states(), mdp.n_actions());
    let mut transitions = Vec::with_capacity(n_s);
    let mut rewards = Vec::with_capacity(n_s);
    for s in 0..n_s {
        let mut row_t = Vec::with_capacity(n_a);
        let mut row_r = Vec::with_capacity(n_a);
        for a in 0..n_a {
            let mut dist = vec![0.0; n_s];
            let mut reward = 0.0;
            for b in 0..n_a {
                let w = if a == b { 1.0 - slip } else { 0.0 } + slip / n_a as f64;
                reward += w * mdp.reward(s, b);
                for &(t, p) in mdp.transitions(s, b) {
                    dist[t] += w * p;
                }
            }
            let total: f64 = dist.iter().sum();
            row_t.push(
                dist.into_iter()
                    .enumerate()
                    .filter(|(_, p)| *p > 0.0)
                    .map(|(t, p)| (t, p / total))
                    .collect(),
            );
            row_r.push(reward);
        }
        transitions.push(row_t);
        rewards.push(row_r);
    }
    let absorbing = (0..n_s).map(|s| mdp.is_absorbing(s)).collect();
    ExactMdp::new(transitions, rewards, mdp.gamma(), mdp.initial_state(), absorbing)
}

impl Env for MdpEnv {
    fn name(&self) -> &'static str {
        self.name
    }

    fn obs_dim(&self) -> usize {
        self.mdp.n_states()
    }

    fn n_actions(&self) -> usize {
        self.mdp.n_actions()
    }

    fn reset(&mut self, _rng: &mut dyn RngCore) -> Vec<f64> {
        self.state = self.mdp.initial_state();
        self.steps = 0;
        self.one_hot(self.state)
    }

    fn step(&mut self, action: usize, rng: &mut dyn RngCore) -> Result<StepOutcome> {
        if action >= self.mdp.n_actions() {
            return Err(Error::Index(format!("action {action} out of range 0..{}", self.mdp.n_actions())));
        }
        if self.mdp.is_absorbing(self.state) {
            return Err(domain("step called after termination; reset first"));
        }
        let row = self.mdp.transitions(self.state, action);
        let mut u: f64 = rng.random();
        let mut next = row.last().expect("nonempty row").0;
        for &(t, p) in row {
            if u < p {
                next = t;
                break;
            }
            u -= p;
        }
        let reward = self.mdp.reward(self.state, action);
        self.state = next;
        self.steps += 1;
        let terminated = self.mdp.is_absorbing(next);
        Ok(StepOutcome {
            obs: self.one_hot(next),
            reward,
            terminated,
            truncated: !terminated && self.steps >= self.max_steps,
        })
    }

    fn exact_model(&self) -> Option<ExactModel> {
        Some(ExactModel {
            mdp: self.mdp.clone(),
            observations: (0..self.mdp.n_states()).map(|s| self.one_hot(s)).collect(),
        })
    }
}

/// A line of `length` cells with actions [left, right]; the rightmost cell
/// is an absorbing goal and every step costs -1.
pub fn chain(length: usize, gamma: f64) -> Result<ExactMdp> {
    if length < 2 {
        return Err(domain("chain needs at least two cells"));
    }
    let goal = length - 1;
    let transitions = (0..length)
        .map(|s| {
            if s == goal {
                vec![vec![(s, 1.0)]; 2]
            } else {
                vec![vec![(s.saturating_sub(1), 1.0)], vec![(s + 1, 1.0)]]
            }
        })
        .collect();
    let rewards = (0..length)
        .map(|s| if s == goal { vec![0.0; 2] } else { vec![-1.0; 2] })
        .collect();
    let mut absorbing = vec![false; length];
    absorbing[goal] = true;
    ExactMdp::new(transitions, rewards, gamma, 0, absorbing)
}

fn count(p: f64, what: &str) -> Result<usize> {
    if p >= 1.0 && p.fract() == 0.0 && p <= 1e6 {
        Ok(p as usize)
    } else {
        Err(domain(format!("{what} must be a positive integer, got {p}")))
    }
}

pub fn registry() -> &'static Registry<dyn Env> {
    static REGISTRY: OnceLock<Registry<dyn Env>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut r: Registry<dyn Env> = Registry::new("environment");
        r.register("gridworld", "rows x cols grid, start top-left, goal bottom-right (rows, cols, max_steps, slip)", |p| {
            let rows = count(p.get_or("rows", 4.0), "rows")?;
            let cols = count(p.get_or("cols", 4.0), "cols")?;
            let max_steps = count(p.get_or("max_steps", 32.0), "max_steps")?;
            let slip = p.get_or("slip", 0.0);
            Ok(Box::new(MdpEnv::new("gridworld", gridworld(rows, cols, 0.99)?, max_steps, slip)?))
        })
        .register("chain", "corridor with left/right actions, goal at the far end (length, max_steps, slip)", |p| {
            let length = count(p.get_or("length", 8.0), "length")?;
            let max_steps = count(p.get_or("max_steps", 32.0), "max_steps")?;
            let slip = p.get_or("slip", 0.0);
            Ok(Box::new(MdpEnv::new("chain", chain(length, 0.99)?, max_steps, slip)?))
        });
        r
    })
}

impl EnvSpec {
    pub fn build(&self) -> Result<Box<dyn Env>> {
        registry().build(&self.kind, &self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::Params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gridworld_episode() {
        let mut env = EnvSpec {
            kind: "gridworld".into(),
            params: Params::from([("rows".into(), 2.0), ("cols".into(), 2.0)]),
        }
        .build()
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(env.reset(&mut rng), vec![1.0, 0.0, 0.0, 0.0]);
        let o = env.step(3, &mut rng).unwrap();
        assert_eq!((o.obs.as_slice(), o.reward, o.terminated), ([0.0, 1.0, 0.0, 0.0].as_slice(), -1.0, false));
        let o = env.step(1, &mut rng).unwrap();
        assert!(o.terminated && !o.truncated);
        assert!(env.step(0, &mut rng).is_err());
        assert!(env.exact_model().is_some());
    }

    #[test]
    fn truncation_and_bad_actions() {
        let mut env = MdpEnv::new("chain", chain(4, 0.99).unwrap(), 2, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        env.reset(&mut rng);
        assert!(!env.step(0, &mut rng).unwrap().truncated);
        assert!(env.step(0, &mut rng).unwrap().truncated);
        assert!(env.step(5, &mut rng).is_err());
    }

    #[test]
    fn slip_mixes_transitions() {
        let env = MdpEnv::new("chain", chain(3, 0.99).unwrap(), 10, 0.5).unwrap();
        let row = env.mdp().transitions(1, 1);
        assert_eq!(row, &[(0, 0.25), (2, 0.75)]);
        assert!(MdpEnv::new("chain", chain(3, 0.99).unwrap(), 10, 1.5).is_err());
    }

    #[test]
    fn registry_rejects_bad_params() {
        let spec = |k: &str, params: &[(&str, f64)]| EnvSpec {
            kind: k.into(),
            params: params.iter().map(|(a, b)| (a.to_string(), *b)).collect(),
        };
        assert!(spec("gridworld", &[("rows", 2.5)]).build().is_err());
        assert!(spec("gridworld", &[("colour", 1.0)]).build().is_err());
        assert!(spec("maze", &[]).build().is_err());
        assert_eq!(spec("chain", &[("length", 5.0)]).build().unwrap().obs_dim(), 5);
    }
}
