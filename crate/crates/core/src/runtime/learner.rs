//! Learner state and the single-iteration update.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::LearnerConfig;
use super::optim::AdamW;
use crate::diagnostics::ContributionRecord;
use crate::error::{domain, Error, Result};
use crate::policy::autodiff::Tape;
use crate::policy::{Checkpoint, MlpActorCritic, MlpConfig, ParamGroup};
use crate::replay::{Sampled, VersionGap};
use crate::surrogate::Surrogate;
use crate::targets::{TargetEstimator, TrajectorySegment};

/// Everything the learner mutates.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: MlpActorCritic,
    pub optimizer: AdamW,
    pub rng: ChaCha8Rng,
    pub seed: u64,
    pub env_steps: u64,
}

/// RNG stream reserved for parameter initialisation.
const INIT_STREAM: u64 = u64::MAX;
/// RNG stream used by the learner for batch sampling.
pub const LEARNER_STREAM: u64 = 0;

impl TrainState {
    pub fn new(model_config: MlpConfig, config: &LearnerConfig, seed: u64) -> Result<Self> {
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        init.set_stream(INIT_STREAM);
        let model = MlpActorCritic::new(model_config, &mut init)?;
        let shapes: Vec<_> = model.tensors().iter().map(Array2::dim).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(LEARNER_STREAM);
        Ok(Self {
            optimizer: AdamW::new(config.optimizer, &shapes)?,
            model,
            rng,
            seed,
            env_steps: 0,
        })
    }

    pub fn version(&self) -> u64 {
        self.model.version()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let cfg = self.model.config();
        let opt = self.optimizer.config();
        let hidden: Vec<String> = cfg.hidden.iter().map(usize::to_string).collect();
        let seed_hex: String = self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        let mut ckpt = Checkpoint::new()
            .with_meta("version", self.version())
            .with_meta("env_steps", self.env_steps)
            .with_meta("seed", self.seed)
            .with_meta("input_dim", cfg.input_dim)
            .with_meta("hidden", hidden.join(","))
            .with_meta("n_actions", cfg.n_actions)
            .with_meta("policy_init_scale", cfg.policy_init_scale)
            .with_meta("adam_steps", self.optimizer.steps())
            .with_meta("adam_beta1", opt.beta1)
            .with_meta("adam_beta2", opt.beta2)
            .with_meta("adam_eps", opt.eps)
            .with_meta("adam_weight_decay", opt.weight_decay)
            .with_meta(
                "adam_max_grad_norm",
                opt.max_grad_norm.map_or("none".to_string(), |n| n.to_string()),
            )
            .with_meta("rng_seed", seed_hex)
            .with_meta("rng_stream", self.rng.get_stream())
            .with_meta("rng_word_pos", self.rng.get_word_pos());
        let names = self.model.tensor_names();
        for (name, t) in names.iter().zip(self.model.tensors()) {
            ckpt.push(format!("param.{name}"), t.clone());
        }
        for (name, t) in names.iter().zip(self.optimizer.first_moments()) {
            ckpt.push(format!("adam_m.{name}"), t.clone());
        }
        for (name, t) in names.iter().zip(self.optimizer.second_moments()) {
            ckpt.push(format!("adam_v.{name}"), t.clone());
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let hidden_text = ckpt.meta("hidden")?;
        let hidden = if hidden_text.is_empty() {
            Vec::new()
        } else {
            hidden_text
                .split(',')
                .map(|h| h.parse().map_err(|_| Error::Format(format!("bad hidden width {h:?}"))))
                .collect::<Result<Vec<usize>>>()?
        };
        let model_config = MlpConfig {
            input_dim: ckpt.meta_parse("input_dim")?,
            hidden,
            n_actions: ckpt.meta_parse("n_actions")?,
            policy_init_scale: ckpt.meta_parse("policy_init_scale")?,
        };
        let names: Vec<String> = model_config.shapes().into_iter().map(|(n, _)| n).collect();
        let collect = |prefix: &str| -> Result<Vec<Array2<f64>>> {
            names.iter().map(|n| ckpt.tensor(&format!("{prefix}.{n}")).cloned()).collect()
        };
        let model = MlpActorCritic::from_tensors(model_config, collect("param")?, ckpt.meta_parse("version")?)?;
        let max_grad_norm = match ckpt.meta("adam_max_grad_norm")? {
            "none" => None,
            _ => Some(ckpt.meta_parse("adam_max_grad_norm")?),
        };
        let opt_config = super::config::OptimizerConfig {
            beta1: ckpt.meta_parse("adam_beta1")?,
            beta2: ckpt.meta_parse("adam_beta2")?,
            eps: ckpt.meta_parse("adam_eps")?,
            weight_decay: ckpt.meta_parse("adam_weight_decay")?,
            max_grad_norm,
        };
        let optimizer = AdamW::from_state(opt_config, collect("adam_m")?, collect("adam_v")?, ckpt.meta_parse("adam_steps")?)?;
        let seed_hex = ckpt.meta("rng_seed")?;
        if seed_hex.len() != 64 {
            return Err(Error::Format("rng seed must be 32 hex bytes".into()));
        }
        let mut seed_bytes = [0u8; 32];
        for (i, b) in seed_bytes.iter_mut().enumerate() {
            *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16)
                .map_err(|_| Error::Format("rng seed is not hex".into()))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed_bytes);
        rng.set_stream(ckpt.meta_parse("rng_stream")?);
        rng.set_word_pos(ckpt.meta_parse("rng_word_pos")?);
        Ok(Self {
            model,
            optimizer,
            rng,
            seed: ckpt.meta_parse("seed")?,
            env_steps: ckpt.meta_parse("env_steps")?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// A sampled batch with fixed advantages and value targets.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedBatch {
    /// `n x obs_dim`.
    pub obs: Array2<f64>,
    pub actions: Vec<usize>,
    /// `n x 1` behavior log-probabilities.
    pub behavior_logprobs: Array2<f64>,
    /// `n x 1`.
    pub advantages: Array2<f64>,
    /// `n x 1`.
    pub value_targets: Array2<f64>,
    pub gaps: Vec<VersionGap>,
}

impl PreparedBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

fn column(values: impl IntoIterator<Item = f64>) -> Array2<f64> {
    let v: Vec<f64> = values.into_iter().collect();
    let n = v.len();
    Array2::from_shape_vec((n, 1), v).expect("column shape")
}

/// Builds targets for the first transition of every sampled suffix with the
/// current parameters. All suffix observations plus bootstrap observations
/// go through one batched forward pass.
pub fn prepare_batch(
    model: &MlpActorCritic,
    batch: &[Sampled],
    estimator: &dyn TargetEstimator,
    gamma: f64,
    normalize_advantages: bool,
) -> Result<PreparedBatch> {
    if batch.is_empty() {
        return Err(domain("empty batch"));
    }
    let dim = model.config().input_dim;
    let mut rows: Vec<f64> = Vec::new();
    let mut offsets = Vec::with_capacity(batch.len());
    for item in batch {
        offsets.push(rows.len() / dim);
        for t in &item.suffix {
            if t.obs.len() != dim {
                return Err(Error::LengthMismatch {
                    what: "observation",
                    expected: dim,
                    got: t.obs.len(),
                });
            }
            rows.extend_from_slice(&t.obs);
        }
        let last = item.suffix.last().expect("suffix is nonempty");
        if last.next_obs.len() != dim {
            return Err(Error::LengthMismatch {
                what: "next observation",
                expected: dim,
                got: last.next_obs.len(),
            });
        }
        rows.extend_from_slice(&last.next_obs);
    }
    let all = Array2::from_shape_vec((rows.len() / dim, dim), rows).expect("stacked observations");
    let (log_probs, values) = model.evaluate_batch(all.view());

    let mut advantages = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for (item, &off) in batch.iter().zip(&offsets) {
        let k = item.suffix.len();
        let segment = TrajectorySegment::new(
            item.suffix.iter().map(|t| t.reward).collect(),
            item.suffix.iter().map(|t| t.behavior_logprob).collect(),
            item.suffix.last().expect("nonempty").done,
        )?;
        let target_lps: Vec<f64> = item
            .suffix
            .iter()
            .enumerate()
            .map(|(j, t)| log_probs[[off + j, t.action]])
            .collect();
        let est = estimator.estimate(&segment, &values[off..off + k + 1], &target_lps, gamma)?;
        advantages.push(est.advantages[0]);
        targets.push(est.value_targets[0]);
    }
    if normalize_advantages && advantages.len() > 1 {
        let n = advantages.len() as f64;
        let mean = advantages.iter().sum::<f64>() / n;
        let std = (advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        for a in &mut advantages {
            *a = (*a - mean) / (std + 1e-8);
        }
    }

    let first_rows: Vec<usize> = offsets.clone();
    let obs = all.select(Axis(0), &first_rows);
    Ok(PreparedBatch {
        obs,
        actions: batch.iter().map(|b| b.transition().action).collect(),
        behavior_logprobs: column(batch.iter().map(|b| b.transition().behavior_logprob)),
        advantages: column(advantages),
        value_targets: column(targets),
        gaps: batch.iter().map(|b| b.gap).collect(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub total: f64,
}

/// Loss values, per-tensor gradients and the ratios they were computed at.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub parts: LossParts,
    pub grads: Vec<Array2<f64>>,
    pub ratios: Vec<f64>,
}

/// `L_pi + value_coef * L_v - entropy_coef * H` and its gradient.
pub fn loss_and_grads(
    model: &MlpActorCritic,
    batch: &PreparedBatch,
    surrogate: &dyn Surrogate,
    value_coef: f64,
    entropy_coef: f64,
) -> LossEval {
    let mut tape = Tape::new();
    let fwd = model.forward_tape(&mut tape, &batch.obs);
    let lp = tape.gather(fwd.log_probs, &batch.actions);
    let behavior = tape.constant(batch.behavior_logprobs.clone());
    let log_ratio = tape.sub(lp, behavior);
    let ratio = tape.exp(log_ratio);
    let objective = surrogate.objective(&mut tape, ratio, &batch.advantages);
    let mean_objective = tape.mean(objective);
    let policy_loss = tape.scale(mean_objective, -1.0);

    let targets = tape.constant(batch.value_targets.clone());
    let err = tape.sub(fwd.value, targets);
    let sq = tape.square(err);
    let value_loss = tape.mean(sq);

    let probs = tape.exp(fwd.log_probs);
    let plogp = tape.mul(probs, fwd.log_probs);
    let neg_entropy_rows = tape.row_sum(plogp);
    let neg_entropy = tape.mean(neg_entropy_rows);

    let weighted_value = tape.scale(value_loss, value_coef);
    let mut total = tape.add(policy_loss, weighted_value);
    if entropy_coef != 0.0 {
        let ent_term = tape.scale(neg_entropy, entropy_coef);
        total = tape.add(total, ent_term);
    }
    let grads = tape.backward(total);
    LossEval {
        parts: LossParts {
            policy: tape.scalar(policy_loss),
            value: tape.scalar(value_loss),
            entropy: -tape.scalar(neg_entropy),
            total: tape.scalar(total),
        },
        grads: fwd
            .params
            .iter()
            .zip(model.tensors())
            .map(|(v, t)| grads.get_or_zeros(*v, t.dim()))
            .collect(),
        ratios: tape.value(ratio).column(0).to_vec(),
    }
}

/// What one update reports.
#[derive(Clone, Debug)]
pub struct UpdateMetrics {
    /// Learner version after the update.
    pub version: u64,
    pub losses: LossParts,
    pub grad_norm: f64,
    pub records: Vec<ContributionRecord>,
    /// Mean of `(rho - 1) - ln rho`, an estimate of `KL(mu || pi)`.
    pub kl_to_behavior: f64,
}

/// A learner bound to its surrogate and target scheme.
#[derive(Debug)]
pub struct Learner {
    pub config: LearnerConfig,
    surrogate: Box<dyn Surrogate>,
    estimator: Box<dyn TargetEstimator>,
}

impl Learner {
    pub fn new(config: LearnerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            surrogate: config.surrogate.build()?,
            estimator: config.target.build()?,
            config,
        })
    }

    pub fn surrogate(&self) -> &dyn Surrogate {
        self.surrogate.as_ref()
    }

    pub fn estimator(&self) -> &dyn TargetEstimator {
        self.estimator.as_ref()
    }

    pub fn prepare(&self, model: &MlpActorCritic, batch: &[Sampled]) -> Result<PreparedBatch> {
        prepare_batch(
            model,
            batch,
            self.estimator.as_ref(),
            self.config.gamma,
            self.config.normalize_advantages,
        )
    }

    pub fn loss(&self, model: &MlpActorCritic, batch: &PreparedBatch) -> LossEval {
        loss_and_grads(
            model,
            batch,
            self.surrogate.as_ref(),
            self.config.value_coef,
            self.config.entropy_coef,
        )
    }

    /// One iteration: targets, loss, one optimizer step, version tick.
    pub fn update(&self, state: &mut TrainState, batch: &[Sampled]) -> Result<UpdateMetrics> {
        let prepared = self.prepare(&state.model, batch)?;
        self.update_prepared(state, &prepared)
    }

    pub fn update_prepared(&self, state: &mut TrainState, batch: &PreparedBatch) -> Result<UpdateMetrics> {
        let eval = self.loss(&state.model, batch);
        let finite = eval.parts.total.is_finite() && eval.grads.iter().all(|g| g.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::NonFinite(failure_dump(state, batch, &eval)));
        }
        let lrs: Vec<f64> = (0..eval.grads.len())
            .map(|i| match state.model.group(i) {
                ParamGroup::Policy => self.config.policy_lr,
                ParamGroup::Value => self.config.value_lr,
            })
            .collect();
        let grad_norm = state.optimizer.step(state.model.tensors_mut(), &eval.grads, &lrs)?;
        if !state.model.is_finite() {
            return Err(Error::NonFinite(failure_dump(state, batch, &eval)));
        }
        let version = state.model.version() + 1;
        state.model.set_version(version);

        let records = eval
            .ratios
            .iter()
            .zip(batch.advantages.column(0))
            .zip(&batch.gaps)
            .map(|((&ratio, &advantage), &gap)| ContributionRecord {
                ratio,
                multiplier: self.surrogate.multiplier(ratio, advantage),
                advantage,
                gap,
            })
            .collect();
        let kl_to_behavior =
            eval.ratios.iter().map(|r| (r - 1.0) - r.ln()).sum::<f64>() / eval.ratios.len() as f64;
        Ok(UpdateMetrics {
            version,
            losses: eval.parts,
            grad_norm,
            records,
            kl_to_behavior,
        })
    }
}

/// Convenience wrapper building a [`Learner`] for a single update.
pub fn learner_update(state: &mut TrainState, batch: &[Sampled], config: &LearnerConfig) -> Result<UpdateMetrics> {
    Learner::new(config.clone())?.update(state, batch)
}

fn failure_dump(state: &TrainState, batch: &PreparedBatch, eval: &LossEval) -> String {
    let range = |v: &mut dyn Iterator<Item = f64>| {
        v.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
    };
    let (rlo, rhi) = range(&mut eval.ratios.iter().copied());
    let (alo, ahi) = range(&mut batch.advantages.iter().copied());
    let mut s = String::new();
    let _ = write!(
        s,
        "non-finite loss at version {}: policy={} value={} entropy={} total={}; ratio in [{rlo}, {rhi}]; advantage in [{alo}, {ahi}]; batch size {}; parameters finite: {}",
        state.version(),
        eval.parts.policy,
        eval.parts.value,
        eval.parts.entropy,
        eval.parts.total,
        batch.len(),
        state.model.is_finite(),
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::replay::Transition;
    use crate::surrogate::{NoClip, SurrogateKind};

    fn one_hot(i: usize, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    fn sampled(obs: Vec<f64>, action: usize, reward: f64, blp: f64, done: bool) -> Sampled {
        let next_obs = vec![0.0; obs.len()];
        Sampled {
            seq: 0,
            gap: VersionGap::new(0, 0).unwrap(),
            suffix: vec![Transition {
                obs,
                action,
                reward,
                next_obs,
                done,
                behavior_logprob: blp,
                behavior_version: 0,
                segment_remaining: 0,
            }],
        }
    }

    fn tabular_state(config: &LearnerConfig) -> TrainState {
        let mc = MlpConfig {
            input_dim: 3,
            hidden: vec![],
            n_actions: 4,
            policy_init_scale: 1.0,
        };
        TrainState::new(mc, config, 11).unwrap()
    }

    fn manual_batch(model: &MlpActorCritic, adv: f64, rho: f64) -> PreparedBatch {
        let obs = one_hot(1, 3);
        let (logits, _) = model.forward(&obs).unwrap();
        let lp = crate::policy::log_softmax(&logits)[2];
        PreparedBatch {
            obs: Array2::from_shape_vec((1, 3), obs).unwrap(),
            actions: vec![2],
            behavior_logprobs: column([lp - rho.ln()]),
            advantages: column([adv]),
            value_targets: column([0.0]),
            gaps: vec![VersionGap::new(0, 0).unwrap()],
        }
    }

    #[test]
    fn zero_advantage_gives_zero_policy_gradient() {
        let mut config = LearnerConfig::new(SurrogateKind::Gipo { sigma: 1.0 }, 1, 1);
        config.entropy_coef = 0.0;
        let state = tabular_state(&config);
        let batch = manual_batch(&state.model, 0.0, 1.0);
        let eval = Learner::new(config).unwrap().loss(&state.model, &batch);
        assert!(eval.grads[0].iter().all(|g| *g == 0.0));
        assert!(eval.grads[1].iter().all(|g| *g == 0.0));
        assert_eq!(eval.ratios, vec![1.0]);
    }

    #[test]
    fn single_sample_no_clip_direction() {
        let mut config = LearnerConfig::new(SurrogateKind::NoClip, 1, 1);
        config.value_coef = 0.0;
        let state = tabular_state(&config);
        let (rho, adv) = (1.7, -0.6);
        let batch = manual_batch(&state.model, adv, rho);
        let eval = loss_and_grads(&state.model, &batch, &NoClip, 0.0, 0.0);
        let probs: Vec<f64> = crate::policy::log_softmax(&state.model.forward(&one_hot(1, 3)).unwrap().0)
            .into_iter()
            .map(f64::exp)
            .collect();
        for a in 0..4 {
            let score = if a == 2 { 1.0 } else { 0.0 } - probs[a];
            let expect = -rho * adv * score;
            assert!((eval.grads[0][[1, a]] - expect).abs() < 1e-12);
            assert!((eval.grads[1][[0, a]] - expect).abs() < 1e-12);
            assert_eq!(eval.grads[0][[0, a]], 0.0);
        }
        assert!((eval.ratios[0] - rho).abs() < 1e-12);
    }

    #[test]
    fn update_ticks_version_and_reports() {
        let config = LearnerConfig::new(SurrogateKind::ppo_default(), 2, 1);
        let mut state = tabular_state(&config);
        let batch = vec![
            sampled(one_hot(0, 3), 1, -1.0, -1.386, false),
            sampled(one_hot(2, 3), 3, -1.0, -0.5, true),
        ];
        let learner = Learner::new(config).unwrap();
        let m = learner.update(&mut state, &batch).unwrap();
        assert_eq!((m.version, state.version()), (1, 1));
        assert_eq!(m.records.len(), 2);
        assert!(m.kl_to_behavior >= 0.0);
        assert!(m.losses.total.is_finite());
    }

    #[test]
    fn non_finite_loss_aborts_with_dump() {
        let config = LearnerConfig::new(SurrogateKind::NoClip, 1, 1);
        let mut state = tabular_state(&config);
        let mut batch = manual_batch(&state.model, 1.0, 1.0);
        batch.advantages[[0, 0]] = f64::NAN;
        let err = Learner::new(config).unwrap().update_prepared(&mut state, &batch).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref msg) if msg.contains("version 0")));
        assert_eq!(state.version(), 0);
    }

    #[test]
    fn prepare_uses_suffix_targets() {
        let mut config = LearnerConfig::new(SurrogateKind::NoClip, 1, 1);
        config.gamma = 0.9;
        let state = tabular_state(&config);
        let mut item = sampled(one_hot(0, 3), 0, -1.0, -1.0, false);
        let mut second = item.suffix[0].clone();
        second.obs = one_hot(1, 3);
        second.next_obs = one_hot(2, 3);
        second.reward = 2.0;
        second.done = true;
        item.suffix[0].next_obs = one_hot(1, 3);
        item.suffix[0].segment_remaining = 1;
        item.suffix.push(second);
        let p = prepare_batch(&state.model, &[item], &crate::targets::Gae { lambda: 1.0 }, 0.9, false).unwrap();
        let v0 = state.model.value(&one_hot(0, 3)).unwrap();
        // lambda = 1 with a terminal: v_hat_0 = r_0 + gamma * r_1
        assert!((p.value_targets[[0, 0]] - (-1.0 + 0.9 * 2.0)).abs() < 1e-12);
        assert!((p.advantages[[0, 0]] - (-1.0 + 0.9 * 2.0 - v0)).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let config = LearnerConfig::new(SurrogateKind::Gipo { sigma: 0.5 }, 2, 1);
        let mut state = TrainState::new(MlpConfig::new(3, vec![5], 4), &config, 5).unwrap();
        let learner = Learner::new(config).unwrap();
        let batch = vec![sampled(one_hot(0, 3), 1, -1.0, -1.2, false)];
        learner.update(&mut state, &batch).unwrap();
        use rand::Rng;
        let _: u64 = state.rng.random();
        state.env_steps = 77;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        state.save(&path).unwrap();
        let back = TrainState::load(&path).unwrap();
        assert_eq!(back.model, state.model);
        assert_eq!(back.optimizer, state.optimizer);
        assert_eq!(back.rng, state.rng);
        assert_eq!((back.seed, back.env_steps), (5, 77));
    }
}
