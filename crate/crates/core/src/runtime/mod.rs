//! The actor-learner pipeline: configuration, environments, the optimizer,
//! the learner update and run orchestration.

pub mod actor;
pub mod config;
pub mod env;
pub mod learner;
pub mod optim;
pub mod train;

pub use actor::{actor_loop, Actor, SnapshotChannel};
pub use config::{EnvSpec, LearnerConfig, OptimizerConfig, RegimeConfig, SamplingMode, SchedulerMode};
pub use env::{Env, ExactModel, MdpEnv, StepOutcome};
pub use learner::{
    learner_update, loss_and_grads, prepare_batch, Learner, LossEval, LossParts, PreparedBatch, TrainState,
    UpdateMetrics,
};
pub use optim::AdamW;
pub use train::{config_hash, exact_return, train, RunManifest, TrainOptions, TrainReport, BUILD_ID};
