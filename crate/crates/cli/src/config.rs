//! The run configuration document.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use gipo_core::runtime::{EnvSpec, LearnerConfig, RegimeConfig, TrainOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    /// Checkpoint period in updates; 0 keeps only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Exact-return evaluation period in updates; 0 disables it.
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default)]
    pub dump_replay: bool,
}

fn default_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_eval_every() -> u64 {
    20
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            checkpoint_every: 0,
            eval_every: default_eval_every(),
            dump_replay: false,
        }
    }
}

/// Everything one training run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: OutputConfig,
    pub regime: RegimeConfig,
    pub learner: LearnerConfig,
    #[serde(default)]
    pub env: EnvSpec,
}

impl RunConfig {
    /// Parses and validates; nothing runs on a config that fails here.
    pub fn parse(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).context("invalid run config")?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.regime.validate().context("[regime]")?;
        self.learner.validate().context("[learner]")?;
        self.env.build().context("[env]")?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn train_options(&self, out_dir: &Path) -> TrainOptions {
        TrainOptions {
            out_dir: Some(out_dir.to_path_buf()),
            checkpoint_every: self.output.checkpoint_every,
            eval_every: self.output.eval_every,
            dump_replay: self.output.dump_replay,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"
seed = 3

[output]
dir = "runs/x"
eval_every = 10

[regime]
num_actors = 2
segment_len = 8
capacity = 1024
t_old = 64
updates_per_round = 4
warmup_transitions = 64

[learner]
batch_size = 32
iterations = 100
policy_lr = 1e-3
surrogate = { kind = "gipo", sigma = 1.0 }
target = { kind = "vtrace", rho_bar = 1.0, c_bar = 1.0 }

[env]
kind = "gridworld"
rows = 3
cols = 3
"#;

    #[test]
    fn round_trips() {
        let a = RunConfig::parse(SAMPLE).unwrap();
        assert_eq!(a.seed, 3);
        assert_eq!(a.env.params["rows"], 3.0);
        let b = RunConfig::parse(&a.to_toml().unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_unknown_and_missing_keys() {
        let extra = SAMPLE.replace("seed = 3", "seed = 3\ncolour = 1");
        assert!(format!("{:#}", RunConfig::parse(&extra).unwrap_err()).contains("colour"));
        let missing = SAMPLE.replace("batch_size = 32\n", "");
        assert!(format!("{:#}", RunConfig::parse(&missing).unwrap_err()).contains("batch_size"));
        let bad_env = SAMPLE.replace("cols = 3", "cols = 3\nwalls = 2");
        assert!(format!("{:#}", RunConfig::parse(&bad_env).unwrap_err()).contains("walls"));
        let bad_sigma = SAMPLE.replace("sigma = 1.0", "sigma = -1.0");
        assert!(RunConfig::parse(&bad_sigma).is_err());
    }

    #[test]
    fn shipped_config_parses() {
        let cfg = RunConfig::parse(include_str!("../../../configs/stale_toy.toml")).unwrap();
        assert_eq!(cfg.regime.num_actors, 2);
    }
}
