//! Rollout actors and the parameter-snapshot channel.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::env::Env;
use crate::error::{Error, Result};
use crate::policy::{log_softmax, MlpActorCritic};
use crate::replay::{ReplayBuffer, Transition};

/// Latest published learner parameters. Readers always get a whole snapshot.
#[derive(Debug)]
pub struct SnapshotChannel {
    slot: RwLock<Arc<MlpActorCritic>>,
}

impl SnapshotChannel {
    pub fn new(model: MlpActorCritic) -> Self {
        Self {
            slot: RwLock::new(Arc::new(model)),
        }
    }

    pub fn publish(&self, model: MlpActorCritic) {
        *self.slot.write().expect("snapshot lock poisoned") = Arc::new(model);
    }

    pub fn latest(&self) -> Arc<MlpActorCritic> {
        Arc::clone(&self.slot.read().expect("snapshot lock poisoned"))
    }
}

/// One environment plus its sampling state.
#[derive(Debug)]
pub struct Actor {
    pub id: usize,
    env: Box<dyn Env>,
    rng: ChaCha8Rng,
    obs: Option<Vec<f64>>,
    episode_return: f64,
    pub completed_returns: Vec<f64>,
    pub failures: u64,
    pub events: Vec<String>,
}

impl Actor {
    /// Actor `id` draws from stream `id + 1` of the run seed.
    pub fn new(id: usize, env: Box<dyn Env>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id as u64 + 1);
        Self {
            id,
            env,
            rng,
            obs: None,
            episode_return: 0.0,
            completed_returns: Vec::new(),
            failures: 0,
            events: Vec::new(),
        }
    }

    pub fn env(&self) -> &dyn Env {
        self.env.as_ref()
    }

    fn reset(&mut self) -> Vec<f64> {
        self.episode_return = 0.0;
        self.env.reset(&mut self.rng)
    }

    /// Rolls at most `segment_len` steps with `policy`, stamping each
    /// transition with the policy's version. The segment ends early at an
    /// episode boundary or an environment failure; after a failure the
    /// episode restarts.
    pub fn rollout(&mut self, policy: &MlpActorCritic, segment_len: usize) -> Result<Vec<Transition>> {
        let mut obs = match self.obs.take() {
            Some(o) => o,
            None => self.reset(),
        };
        let mut segment = Vec::with_capacity(segment_len);
        for _ in 0..segment_len {
            let (logits, _) = policy.forward(&obs)?;
            let log_probs = log_softmax(&logits);
            let action = sample_categorical(&log_probs, &mut self.rng);
            let outcome = match self.env.step(action, &mut self.rng) {
                Ok(o) => o,
                Err(e) => {
                    self.failures += 1;
                    self.events
                        .push(format!("actor {}: environment failure ({e}); episode restarted", self.id));
                    obs = self.reset();
                    break;
                }
            };
            self.episode_return += outcome.reward;
            let episode_over = outcome.terminated || outcome.truncated;
            segment.push(Transition {
                obs: std::mem::replace(&mut obs, outcome.obs.clone()),
                action,
                reward: outcome.reward,
                next_obs: outcome.obs,
                done: outcome.terminated,
                behavior_logprob: log_probs[action],
                behavior_version: policy.version(),
                segment_remaining: 0,
            });
            if episode_over {
                self.completed_returns.push(self.episode_return);
                obs = self.reset();
                break;
            }
        }
        self.obs = Some(obs);
        Ok(segment)
    }
}

fn sample_categorical(log_probs: &[f64], rng: &mut impl Rng) -> usize {
    let mut u: f64 = rng.random();
    for (a, lp) in log_probs.iter().enumerate() {
        let p = lp.exp();
        if u < p {
            return a;
        }
        u -= p;
    }
    log_probs
        .iter()
        .rposition(|lp| lp.is_finite())
        .unwrap_or(log_probs.len() - 1)
}

/// Threaded actor body: refresh the snapshot, roll a segment, append it,
/// until `stop` is raised. Returns the actor so its bookkeeping survives.
pub fn actor_loop(
    mut actor: Actor,
    snapshots: &SnapshotChannel,
    buffer: &Mutex<ReplayBuffer>,
    segment_len: usize,
    stop: &AtomicBool,
    env_steps: &AtomicU64,
) -> (Actor, Result<()>) {
    while !stop.load(Ordering::Acquire) {
        let policy = snapshots.latest();
        let segment = match actor.rollout(&policy, segment_len) {
            Ok(s) => s,
            Err(e) => {
                stop.store(true, Ordering::Release);
                return (actor, Err(e));
            }
        };
        if segment.is_empty() {
            continue;
        }
        let n = segment.len() as u64;
        let appended = buffer
            .lock()
            .map_err(|_| Error::Config("replay lock poisoned".into()))
            .and_then(|mut b| b.append_segment(segment));
        if let Err(e) = appended {
            stop.store(true, Ordering::Release);
            return (actor, Err(e));
        }
        env_steps.fetch_add(n, Ordering::AcqRel);
    }
    (actor, Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::MlpConfig;
    use crate::runtime::env::{chain, MdpEnv, StepOutcome};
    use rand::RngCore;

    fn model(dim: usize, actions: usize) -> MlpActorCritic {
        MlpActorCritic::new(MlpConfig::new(dim, vec![4], actions), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn segments_respect_length_and_episodes() {
        let env = MdpEnv::new("chain", chain(3, 0.99).unwrap(), 50, 0.0).unwrap();
        let mut actor = Actor::new(0, Box::new(env), 1);
        let mut m = model(3, 2);
        m.set_version(4);
        let mut total = 0;
        for _ in 0..50 {
            let seg = actor.rollout(&m, 5).unwrap();
            assert!(!seg.is_empty() && seg.len() <= 5);
            assert!(seg.iter().all(|t| t.behavior_version == 4 && t.behavior_logprob < 0.0));
            assert!(seg[..seg.len() - 1].iter().all(|t| !t.done));
            total += seg.len();
        }
        assert!(!actor.completed_returns.is_empty());
        assert!(total >= 50);
    }

    #[derive(Debug)]
    struct Flaky {
        calls: usize,
    }

    impl Env for Flaky {
        fn name(&self) -> &'static str {
            "flaky"
        }
        fn obs_dim(&self) -> usize {
            1
        }
        fn n_actions(&self) -> usize {
            2
        }
        fn reset(&mut self, _: &mut dyn RngCore) -> Vec<f64> {
            vec![0.0]
        }
        fn step(&mut self, _: usize, _: &mut dyn RngCore) -> Result<StepOutcome> {
            self.calls += 1;
            if self.calls % 3 == 0 {
                return Err(Error::Config("simulated crash".into()));
            }
            Ok(StepOutcome {
                obs: vec![self.calls as f64],
                reward: 1.0,
                terminated: false,
                truncated: false,
            })
        }
    }

    #[test]
    fn env_failure_restarts_episode() {
        let mut actor = Actor::new(0, Box::new(Flaky { calls: 0 }), 1);
        let m = model(1, 2);
        let seg = actor.rollout(&m, 10).unwrap();
        assert_eq!(seg.len(), 2);
        assert_eq!(actor.failures, 1);
        assert!(actor.events[0].contains("simulated crash"));
        let seg = actor.rollout(&m, 10).unwrap();
        assert_eq!(seg[0].obs, vec![0.0]);
    }

    #[test]
    fn snapshot_channel_swaps_whole_models() {
        let ch = SnapshotChannel::new(model(2, 2));
        let held = ch.latest();
        let mut next = model(2, 2);
        next.set_version(9);
        ch.publish(next);
        assert_eq!(held.version(), 0);
        assert_eq!(ch.latest().version(), 9);
    }

    #[test]
    fn categorical_sampling_frequencies() {
        let lp = log_softmax(&[0.0, 1.0, -1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 3];
        for _ in 0..30_000 {
            counts[sample_categorical(&lp, &mut rng)] += 1;
        }
        for a in 0..3 {
            assert!((counts[a] as f64 / 30_000.0 - lp[a].exp()).abs() < 0.01);
        }
    }
}
