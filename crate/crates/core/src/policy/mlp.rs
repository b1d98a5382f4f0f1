//! MLP actor-critic: a shared tanh trunk feeding a categorical policy head and
//! a scalar value head.
//!
//! Parameters are stored as a list of 2-D tensors in this order:
//! `trunk0.weight, trunk0.bias, trunk1.weight, ..., policy.weight,
//! policy.bias, value.weight, value.bias`. Weights are `(fan_in, fan_out)` and
//! act on row vectors (`h = x W + b`). Flattening walks tensors in that order
//! and each tensor row-major, i.e. lexicographic in (layer, row, column).

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::autodiff::{log_softmax_rows, Tape, Var};
use super::{log_softmax, GradientVector, Policy};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    pub n_actions: usize,
    /// Scale applied to the initial policy-head weights (small keeps the
    /// initial policy close to uniform).
    #[serde(default = "default_policy_init")]
    pub policy_init_scale: f64,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn default_policy_init() -> f64 {
    0.01
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden: Vec<usize>, n_actions: usize) -> Self {
        Self {
            input_dim,
            hidden,
            n_actions,
            policy_init_scale: default_policy_init(),
        }
    }

    /// Tensor shapes in parameter order.
    pub fn shapes(&self) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::new();
        let mut fan_in = self.input_dim;
        for (i, &width) in self.hidden.iter().enumerate() {
            out.push((format!("trunk{i}.weight"), (fan_in, width)));
            out.push((format!("trunk{i}.bias"), (1, width)));
            fan_in = width;
        }
        out.push(("policy.weight".into(), (fan_in, self.n_actions)));
        out.push(("policy.bias".into(), (1, self.n_actions)));
        out.push(("value.weight".into(), (fan_in, 1)));
        out.push(("value.bias".into(), (1, 1)));
        out
    }
}

/// Which optimizer group a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Trunk and policy head.
    Policy,
    /// Value head.
    Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpActorCritic {
    config: MlpConfig,
    tensors: Vec<Array2<f64>>,
    version: u64,
}

/// Nodes produced by [`MlpActorCritic::forward_tape`].
#[derive(Debug)]
pub struct TapeForward {
    /// One tracked leaf per tensor, in parameter order.
    pub params: Vec<Var>,
    pub logits: Var,
    pub log_probs: Var,
    /// `n x 1` state values.
    pub value: Var,
}

impl MlpActorCritic {
    /// Uniform `+-1/sqrt(fan_in)` initialisation, zero biases.
    pub fn new(config: MlpConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.input_dim == 0 || config.n_actions == 0 || config.hidden.contains(&0) {
            return Err(Error::Config("MLP dimensions must be positive".into()));
        }
        let tensors = config
            .shapes()
            .into_iter()
            .map(|(name, (rows, cols))| {
                if name.ends_with(".bias") {
                    return Array2::zeros((rows, cols));
                }
                let bound = 1.0 / (rows as f64).sqrt();
                let scale = if name.starts_with("policy") {
                    config.policy_init_scale
                } else {
                    1.0
                };
                Array2::from_shape_fn((rows, cols), |_| scale * rng.random_range(-bound..bound))
            })
            .collect();
        Ok(Self {
            config,
            tensors,
            version: 0,
        })
    }

    pub fn from_tensors(config: MlpConfig, tensors: Vec<Array2<f64>>, version: u64) -> Result<Self> {
        let shapes = config.shapes();
        if shapes.len() != tensors.len()
            || shapes.iter().zip(&tensors).any(|((_, s), t)| *s != t.dim())
        {
            return Err(Error::Format("tensor shapes do not match the MLP config".into()));
        }
        Ok(Self {
            config,
            tensors,
            version,
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.tensors
    }

    pub fn tensor_names(&self) -> Vec<String> {
        self.config.shapes().into_iter().map(|(n, _)| n).collect()
    }

    pub fn group(&self, tensor_index: usize) -> ParamGroup {
        if tensor_index + 2 >= self.tensors.len() {
            ParamGroup::Value
        } else {
            ParamGroup::Policy
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn set_version(&mut self, version: u64) {
        self.version = version;
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::LengthMismatch {
                what: "flat parameters",
                expected: self.n_params(),
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            for v in t.iter_mut() {
                *v = flat[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_obs(&self, obs: &[f64]) -> Result<()> {
        if obs.len() != self.config.input_dim {
            return Err(Error::LengthMismatch {
                what: "observation",
                expected: self.config.input_dim,
                got: obs.len(),
            });
        }
        Ok(())
    }

    /// Logits and state value for a batch of observations (`n x input_dim`).
    pub fn forward_batch(&self, obs: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
        let layers = self.config.hidden.len();
        let mut h = obs.to_owned();
        for i in 0..layers {
            h = (h.dot(&self.tensors[2 * i]) + &self.tensors[2 * i + 1]).mapv(f64::tanh);
        }
        let p = 2 * layers;
        let logits = h.dot(&self.tensors[p]) + &self.tensors[p + 1];
        let value = h.dot(&self.tensors[p + 2]) + &self.tensors[p + 3];
        (logits, value)
    }

    /// Log-probabilities and state values for a batch.
    pub fn evaluate_batch(&self, obs: ArrayView2<'_, f64>) -> (Array2<f64>, Vec<f64>) {
        let (logits, value) = self.forward_batch(obs);
        (log_softmax_rows(&logits), value.column(0).to_vec())
    }

    pub fn forward(&self, obs: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_obs(obs)?;
        let view = ArrayView2::from_shape((1, obs.len()), obs).expect("row view");
        let (logits, value) = self.forward_batch(view);
        Ok((logits.row(0).to_vec(), value[[0, 0]]))
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64> {
        Ok(self.forward(obs)?.1)
    }

    /// Builds the forward pass on `tape` with every tensor as a tracked leaf.
    pub fn forward_tape(&self, tape: &mut Tape, obs: &Array2<f64>) -> TapeForward {
        let params: Vec<Var> = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
        let mut h = tape.constant(obs.clone());
        let layers = self.config.hidden.len();
        for i in 0..layers {
            let z = tape.matmul(h, params[2 * i]);
            let z = tape.add_row(z, params[2 * i + 1]);
            h = tape.tanh(z);
        }
        let p = 2 * layers;
        let logits = tape.matmul(h, params[p]);
        let logits = tape.add_row(logits, params[p + 1]);
        let value = tape.matmul(h, params[p + 2]);
        let value = tape.add_row(value, params[p + 3]);
        let log_probs = tape.log_softmax(logits);
        TapeForward {
            params,
            logits,
            log_probs,
            value,
        }
    }

    /// Flattens tape gradients for `params` in parameter order.
    pub fn flatten_grads(&self, grads: &super::autodiff::Gradients, params: &[Var]) -> GradientVector {
        let mut out = Vec::with_capacity(self.n_params());
        for (t, v) in self.tensors.iter().zip(params) {
            let g = grads.get_or_zeros(*v, t.dim());
            out.extend(g.iter().copied());
        }
        GradientVector(out)
    }

    /// Gradient of `V(obs)` with respect to all parameters.
    pub fn value_gradient(&self, obs: &[f64]) -> Result<GradientVector> {
        self.check_obs(obs)?;
        let mut tape = Tape::new();
        let x = Array2::from_shape_vec((1, obs.len()), obs.to_vec()).expect("row");
        let fwd = self.forward_tape(&mut tape, &x);
        let v = tape.mean(fwd.value);
        let grads = tape.backward(v);
        Ok(self.flatten_grads(&grads, &fwd.params))
    }
}

impl Policy for MlpActorCritic {
    type State = [f64];

    fn n_actions(&self) -> usize {
        self.config.n_actions
    }

    fn n_params(&self) -> usize {
        self.tensors.iter().map(Array2::len).sum()
    }

    fn log_probs(&self, state: &[f64]) -> Result<Vec<f64>> {
        let (logits, _) = self.forward(state)?;
        Ok(log_softmax(&logits))
    }

    fn score(&self, state: &[f64], action: usize) -> Result<GradientVector> {
        self.check_obs(state)?;
        if action >= self.config.n_actions {
            return Err(Error::Index(format!(
                "action {action} out of range 0..{}",
                self.config.n_actions
            )));
        }
        let mut tape = Tape::new();
        let x = Array2::from_shape_vec((1, state.len()), state.to_vec()).expect("row");
        let fwd = self.forward_tape(&mut tape, &x);
        let picked = tape.gather(fwd.log_probs, &[action]);
        let picked = tape.mean(picked);
        let grads = tape.backward(picked);
        Ok(self.flatten_grads(&grads, &fwd.params))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::detached_ratio;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(rng: &mut ChaCha8Rng) -> MlpActorCritic {
        let mut cfg = MlpConfig::new(3, vec![5, 4], 4);
        cfg.policy_init_scale = 1.0;
        MlpActorCritic::new(cfg, rng).unwrap()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        diff / scale.max(1e-12)
    }

    /// Central differences of `f` over the flat parameter vector.
    fn central_diff(net: &MlpActorCritic, f: impl Fn(&MlpActorCritic) -> f64) -> Vec<f64> {
        let h = 1e-5;
        let base = net.flat();
        let mut probe = net.clone();
        (0..base.len())
            .map(|i| {
                let mut p = base.clone();
                p[i] += h;
                probe.set_flat(&p).unwrap();
                let up = f(&probe);
                p[i] -= 2.0 * h;
                probe.set_flat(&p).unwrap();
                let down = f(&probe);
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn parameter_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = small(&mut rng);
        let names = net.tensor_names();
        assert_eq!(names[0], "trunk0.weight");
        assert_eq!(names.last().unwrap(), "value.bias");
        assert_eq!(net.n_params(), 3 * 5 + 5 + 5 * 4 + 4 + 4 * 4 + 4 + 4 + 1);
        assert_eq!(net.group(0), ParamGroup::Policy);
        assert_eq!(net.group(names.len() - 1), ParamGroup::Value);
        assert_eq!(net.group(names.len() - 2), ParamGroup::Value);
        let flat = net.flat();
        assert_eq!(flat[1], net.tensors()[0][[0, 1]]);
    }

    #[test]
    fn heads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for draw in 0..100 {
            let net = small(&mut rng);
            let obs: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let action = draw % 4;
            let analytic = net.score(&obs, action).unwrap();
            let fd = central_diff(&net, |n| n.log_prob(&obs, action).unwrap());
            assert!(rel_err(&analytic.0, &fd) < 1e-4, "policy head draw {draw}");
            let analytic = net.value_gradient(&obs).unwrap();
            let fd = central_diff(&net, |n| n.value(&obs).unwrap());
            assert!(rel_err(&analytic.0, &fd) < 1e-4, "value head draw {draw}");
        }
    }

    #[test]
    fn forward_is_deterministic_and_normalised() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = small(&mut rng);
        let obs = [0.2, -0.4, 0.9];
        assert_eq!(net.forward(&obs).unwrap(), net.forward(&obs).unwrap());
        let p = net.probs(&obs).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let h = net.entropy(&obs).unwrap();
        assert!(h > 0.0 && h <= 4f64.ln());
        assert!(net.forward(&[0.0; 2]).is_err());
        assert!(net.score(&obs, 4).is_err());
    }

    #[test]
    fn detached_ratio_semantics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = small(&mut rng);
        let obs = Array2::from_shape_vec((1, 3), vec![0.3, 0.1, -0.5]).unwrap();
        let action = 2;
        let behavior = net.log_prob(obs.row(0).as_slice().unwrap(), action).unwrap() - 0.4;
        let blp = Array2::from_elem((1, 1), behavior);

        let mut tape = Tape::new();
        let fwd = net.forward_tape(&mut tape, &obs);
        let lp = tape.gather(fwd.log_probs, &[action]);
        let (live, detached) = detached_ratio(&mut tape, lp, &blp);
        assert_eq!(tape.value(live)[[0, 0]].to_bits(), tape.value(detached)[[0, 0]].to_bits());
        let product = tape.mul(detached, live);
        let product = tape.mean(product);
        let grads = tape.backward(product);
        let analytic = net.flatten_grads(&grads, &fwd.params);

        // Oracle: the detached factor is a frozen number.
        let frozen = tape.value(detached)[[0, 0]];
        let x = obs.row(0).to_vec();
        let fd = central_diff(&net, |n| frozen * (n.log_prob(&x, action).unwrap() - behavior).exp());
        assert!(rel_err(&analytic.0, &fd) < 1e-4);

        // Identical policies give unit ratios.
        let same = Array2::from_elem((1, 1), net.log_prob(&x, action).unwrap());
        let mut tape = Tape::new();
        let fwd = net.forward_tape(&mut tape, &obs);
        let lp = tape.gather(fwd.log_probs, &[action]);
        let (live, detached) = detached_ratio(&mut tape, lp, &same);
        assert!((tape.value(live)[[0, 0]] - 1.0).abs() < 1e-15);
        assert!((tape.value(detached)[[0, 0]] - 1.0).abs() < 1e-15);
    }
}
