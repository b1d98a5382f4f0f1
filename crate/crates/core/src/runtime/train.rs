//! Run orchestration: scheduling, metrics, checkpoints and the manifest.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::actor::{actor_loop, Actor, SnapshotChannel};
use super::config::{EnvSpec, LearnerConfig, RegimeConfig, SchedulerMode};
use super::env::ExactModel;
use super::learner::{Learner, TrainState, UpdateMetrics};
use crate::diagnostics::{utilization, MetricRow};
use crate::error::{Error, Result};
use crate::mdp::{expected_return, PolicyTable};
use crate::policy::{log_softmax, MlpActorCritic, MlpConfig};
use crate::replay::{staleness_summary, ReplayBuffer};
use crate::surrogate::SurrogateKind;

/// Identifies the code that produced a run.
pub const BUILD_ID: &str = match option_env!("GIPO_BUILD_ID") {
    Some(id) => id,
    None => concat!("gipo-", env!("CARGO_PKG_VERSION")),
};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOptions {
    /// Where artifacts go; nothing is written when absent.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint period in updates (0: final checkpoint only).
    pub checkpoint_every: u64,
    /// Exact-evaluation period in updates for models that have one (0: never).
    pub eval_every: u64,
    /// Also write the final replay buffer.
    pub dump_replay: bool,
}

#[derive(Debug)]
pub struct TrainReport {
    pub state: TrainState,
    pub metrics: Vec<MetricRow>,
    pub episode_returns: Vec<f64>,
    pub env_failures: u64,
    pub events: Vec<String>,
    pub buffer: ReplayBuffer,
    pub manifest: RunManifest,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunManifest {
    pub build_id: String,
    pub status: String,
    pub seed: u64,
    pub config_hash: String,
    pub start_env_steps: u64,
    pub end_env_steps: u64,
    pub updates: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub regime: RegimeConfig,
    pub learner: LearnerConfig,
    pub env: EnvSpec,
}

#[derive(Serialize)]
struct HashInput<'a> {
    seed: u64,
    regime: &'a RegimeConfig,
    learner: &'a LearnerConfig,
    env: &'a EnvSpec,
}

/// SHA-256 over the canonical TOML rendering of the run inputs.
pub fn config_hash(regime: &RegimeConfig, learner: &LearnerConfig, env: &EnvSpec, seed: u64) -> Result<String> {
    let text = toml::to_string(&HashInput {
        seed,
        regime,
        learner,
        env,
    })
    .map_err(|e| Error::Config(format!("cannot serialise config: {e}")))?;
    Ok(Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise manifest: {e}")))
    }
}

/// Expected discounted return of `model` from the start state of `exact`.
pub fn exact_return(model: &MlpActorCritic, exact: &ExactModel, gamma: f64) -> Result<f64> {
    let probs = exact
        .observations
        .iter()
        .map(|o| Ok(log_softmax(&model.forward(o)?.0).into_iter().map(f64::exp).collect()))
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let mdp = exact.mdp.with_gamma(gamma)?;
    expected_return(&mdp, &PolicyTable::new(probs)?)
}

fn sigma_of(kind: &SurrogateKind) -> Option<f64> {
    match kind {
        SurrogateKind::Gipo { sigma } => Some(*sigma),
        _ => None,
    }
}

/// Artifact writer that keeps whatever was produced if the run aborts.
struct Sink {
    dir: Option<PathBuf>,
    csv: Option<BufWriter<File>>,
}

impl Sink {
    fn open(dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Self { dir: None, csv: None });
        };
        fs::create_dir_all(dir.join("checkpoints"))?;
        let mut csv = BufWriter::new(File::create(dir.join("metrics.csv"))?);
        MetricRow::write_header(&mut csv)?;
        Ok(Self {
            dir: Some(dir.to_path_buf()),
            csv: Some(csv),
        })
    }

    fn row(&mut self, row: &MetricRow) -> Result<()> {
        if let Some(csv) = &mut self.csv {
            row.write(csv)?;
        }
        Ok(())
    }

    fn checkpoint(&self, state: &TrainState, name: &str) -> Result<()> {
        if let Some(dir) = &self.dir {
            state.save(dir.join("checkpoints").join(name))?;
        }
        Ok(())
    }

    fn manifest(&mut self, manifest: &RunManifest) -> Result<()> {
        if let Some(csv) = &mut self.csv {
            csv.flush()?;
        }
        if let Some(dir) = &self.dir {
            fs::write(dir.join("manifest.toml"), manifest.to_toml()?)?;
        }
        Ok(())
    }

    fn text(&self, name: &str, body: &str) -> Result<()> {
        if let Some(dir) = &self.dir {
            fs::write(dir.join(name), body)?;
        }
        Ok(())
    }
}

struct Run<'a> {
    regime: &'a RegimeConfig,
    learner: Learner,
    exact: Option<ExactModel>,
    options: &'a TrainOptions,
    sink: Sink,
    metrics: Vec<MetricRow>,
}

impl Run<'_> {
    fn record(&mut self, state: &TrainState, update: &UpdateMetrics) -> Result<()> {
        let gaps: Vec<_> = update.records.iter().map(|r| r.gap).collect();
        let staleness = staleness_summary(&gaps, self.regime.t_old)?;
        let util = utilization(&update.records, &self.learner.config.thresholds, self.regime.t_old)?;
        let step = update.version;
        let iterations = self.learner.config.iterations;
        let eval_due = self.options.eval_every > 0
            && (step % self.options.eval_every == 0 || step == 1 || step == iterations);
        let avg_return = match (&self.exact, eval_due) {
            (Some(exact), true) => Some(exact_return(&state.model, exact, self.learner.config.gamma)?),
            _ => None,
        };
        let row = MetricRow {
            step,
            env_steps: state.env_steps,
            method: self.learner.config.surrogate.name().to_string(),
            sigma: sigma_of(&self.learner.config.surrogate),
            old_frac: staleness.old_frac,
            old_gap_p95: staleness.old_gap_p95,
            d95: util.d95,
            dead_frac: util.dead_frac,
            suppressed_frac: util.suppressed_frac,
            near_zero_frac: util.near_zero_frac,
            share_old: util.share_old,
            ess_old_norm: util.ess_old_normalized,
            kl_to_behavior: update.kl_to_behavior,
            avg_return,
        };
        self.sink.row(&row)?;
        self.metrics.push(row);
        if self.options.checkpoint_every > 0 && step % self.options.checkpoint_every == 0 {
            self.sink.checkpoint(state, &format!("step_{step:08}.ckpt"))?;
        }
        Ok(())
    }
}

/// Runs actors and the learner until `learner.iterations` updates are done.
///
/// Writes `metrics.csv`, `manifest.toml` and `checkpoints/` under
/// `options.out_dir` when set. On failure the partial metric stream, a
/// manifest with status `aborted` and (for numerical failures)
/// `abort_dump.txt` are left in place.
pub fn train(
    regime: &RegimeConfig,
    learner: &LearnerConfig,
    env: &EnvSpec,
    seed: u64,
    options: &TrainOptions,
) -> Result<TrainReport> {
    regime.validate()?;
    let learner_impl = Learner::new(learner.clone())?;
    let probe = env.build()?;
    let model_config = MlpConfig::new(probe.obs_dim(), learner.hidden.clone(), probe.n_actions());
    let mut manifest = RunManifest {
        build_id: BUILD_ID.to_string(),
        status: "running".into(),
        seed,
        config_hash: config_hash(regime, learner, env, seed)?,
        start_env_steps: 0,
        end_env_steps: 0,
        updates: 0,
        error: None,
        regime: regime.clone(),
        learner: learner.clone(),
        env: env.clone(),
    };
    let mut run = Run {
        regime,
        learner: learner_impl,
        exact: probe.exact_model(),
        options,
        sink: Sink::open(options.out_dir.as_deref())?,
        metrics: Vec::new(),
    };
    run.sink.manifest(&manifest)?;

    let mut state = TrainState::new(model_config, learner, seed)?;
    let actors = (0..regime.num_actors)
        .map(|i| Ok(Actor::new(i, env.build()?, seed)))
        .collect::<Result<Vec<_>>>()?;
    let mut buffer = ReplayBuffer::new(regime.capacity)?;

    let (actors, outcome) = match regime.scheduler {
        SchedulerMode::Interleaved => interleaved(&mut run, &mut state, actors, &mut buffer),
        SchedulerMode::Threaded => threaded(&mut run, &mut state, actors, &mut buffer),
    };

    manifest.end_env_steps = state.env_steps;
    manifest.updates = state.version();
    let mut events = Vec::new();
    let mut episode_returns = Vec::new();
    let mut env_failures = 0;
    for a in actors {
        events.extend(a.events);
        episode_returns.extend(a.completed_returns);
        env_failures += a.failures;
    }
    if let Err(e) = outcome {
        manifest.status = "aborted".into();
        manifest.error = Some(e.to_string());
        if let Error::NonFinite(dump) = &e {
            run.sink.text("abort_dump.txt", dump)?;
        }
        run.sink.manifest(&manifest)?;
        return Err(e);
    }
    run.sink.checkpoint(&state, "final.ckpt")?;
    if options.dump_replay {
        if let Some(dir) = &options.out_dir {
            buffer.save(dir.join("replay.bin"))?;
        }
    }
    manifest.status = "completed".into();
    run.sink.manifest(&manifest)?;
    Ok(TrainReport {
        state,
        metrics: run.metrics,
        episode_returns,
        env_failures,
        events,
        buffer,
        manifest,
    })
}

/// Deterministic round-robin schedule.
fn interleaved(
    run: &mut Run<'_>,
    state: &mut TrainState,
    mut actors: Vec<Actor>,
    buffer: &mut ReplayBuffer,
) -> (Vec<Actor>, Result<()>) {
    let outcome = (|| -> Result<()> {
        let iterations = run.learner.config.iterations;
        let batch_size = run.learner.config.batch_size;
        while state.version() < iterations {
            for actor in &mut actors {
                let segment = actor.rollout(&state.model, run.regime.segment_len)?;
                state.env_steps += segment.len() as u64;
                if !segment.is_empty() {
                    buffer.append_segment(segment)?;
                }
            }
            if buffer.len() < run.regime.warmup_transitions.max(1) {
                continue;
            }
            for _ in 0..run.regime.updates_per_round {
                if state.version() >= iterations {
                    break;
                }
                let batch = buffer.sample_uniform(batch_size, state.version(), &mut state.rng)?;
                let update = run.learner.update(state, &batch)?;
                run.record(state, &update)?;
            }
        }
        Ok(())
    })();
    (actors, outcome)
}

/// Actors on worker threads; the learner paces itself to the same ratio of
/// updates to collected transitions as the interleaved schedule.
fn threaded(
    run: &mut Run<'_>,
    state: &mut TrainState,
    actors: Vec<Actor>,
    buffer: &mut ReplayBuffer,
) -> (Vec<Actor>, Result<()>) {
    let shared = Mutex::new(std::mem::replace(buffer, ReplayBuffer::new(1).expect("capacity 1")));
    let snapshots = SnapshotChannel::new(state.model.clone());
    let stop = AtomicBool::new(false);
    let env_steps = AtomicU64::new(state.env_steps);
    let regime = run.regime;
    let per_round = (regime.num_actors * regime.segment_len) as f64 / regime.updates_per_round as f64;

    let (actors, outcome) = std::thread::scope(|scope| {
        let handles: Vec<_> = actors
            .into_iter()
            .map(|actor| {
                let (snapshots, shared, stop, env_steps) = (&snapshots, &shared, &stop, &env_steps);
                scope.spawn(move || actor_loop(actor, snapshots, shared, regime.segment_len, stop, env_steps))
            })
            .collect();

        let learner_outcome = (|| -> Result<()> {
            let iterations = run.learner.config.iterations;
            while state.version() < iterations {
                let required = regime.warmup_transitions.max(1) as f64 + state.version() as f64 * per_round;
                while (env_steps.load(Ordering::Acquire) as f64) < required {
                    if stop.load(Ordering::Acquire) {
                        return Ok(());
                    }
                    std::thread::yield_now();
                }
                let batch = {
                    let guard = shared.lock().map_err(|_| Error::Config("replay lock poisoned".into()))?;
                    guard.sample_uniform(run.learner.config.batch_size, state.version(), &mut state.rng)?
                };
                state.env_steps = env_steps.load(Ordering::Acquire);
                let update = run.learner.update(state, &batch)?;
                snapshots.publish(state.model.clone());
                run.record(state, &update)?;
            }
            Ok(())
        })();
        stop.store(true, Ordering::Release);

        let mut actors = Vec::new();
        let mut actor_error = None;
        for h in handles {
            let (actor, res) = h.join().expect("actor thread panicked");
            if let Err(e) = res {
                actor_error.get_or_insert(e);
            }
            actors.push(actor);
        }
        let outcome = match (learner_outcome, actor_error) {
            (Err(e), _) | (Ok(()), Some(e)) => Err(e),
            (Ok(()), None) => Ok(()),
        };
        (actors, outcome)
    });
    state.env_steps = env_steps.load(Ordering::Acquire);
    *buffer = shared.into_inner().unwrap_or_else(|p| p.into_inner());
    (actors, outcome)
}
