use std::fs;

use gipo_core::registry::Params;
use gipo_core::replay::ReplayBuffer;
use gipo_core::runtime::{
    train, EnvSpec, LearnerConfig, RegimeConfig, SchedulerMode, TrainOptions, TrainReport, TrainState,
};
use gipo_core::surrogate::SurrogateKind;
use gipo_core::Error;

fn env() -> EnvSpec {
    EnvSpec {
        kind: "gridworld".into(),
        params: Params::from([("rows".to_string(), 3.0), ("cols".to_string(), 3.0)]),
    }
}

fn learner(iterations: u64) -> LearnerConfig {
    let mut l = LearnerConfig::new(SurrogateKind::Gipo { sigma: 1.0 }, 16, iterations);
    l.hidden = vec![16];
    l.policy_lr = 1e-3;
    l.value_lr = 3e-3;
    l
}

fn regime(actors: usize) -> RegimeConfig {
    RegimeConfig {
        num_actors: actors,
        segment_len: 4,
        capacity: 512,
        t_old: 8,
        updates_per_round: 2,
        warmup_transitions: 32,
        ..RegimeConfig::fresh_toy()
    }
}

fn quick(regime: &RegimeConfig, seed: u64, options: &TrainOptions) -> TrainReport {
    train(regime, &learner(40), &env(), seed, options).unwrap()
}

#[test]
fn single_actor_runs_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let options = TrainOptions {
            out_dir: Some(dir.path().join(name)),
            eval_every: 5,
            ..Default::default()
        };
        quick(&regime(1), 3, &options);
        fs::read(dir.path().join(name).join("metrics.csv")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn accounting_and_causality() {
    let report = quick(&regime(4), 1, &TrainOptions::default());
    assert_eq!(report.state.env_steps, report.buffer.inserted());
    assert_eq!(report.state.version(), 40);
    assert_eq!(report.metrics.len(), 40);
    for (i, row) in report.metrics.iter().enumerate() {
        assert_eq!(row.step, i as u64 + 1);
        assert!((0.0..=1.0).contains(&row.old_frac));
        assert!(row.kl_to_behavior >= -1e-12);
    }
    for t in report.buffer.iter() {
        assert!(t.behavior_version < report.state.version());
    }
}

#[test]
fn tiny_buffer_bounds_staleness() {
    // With capacity equal to one segment, every sample was collected during
    // the last round, at most `updates_per_round - 1` updates ago. The chain
    // is too long for any episode to end inside the run, so segments are full.
    let r = RegimeConfig {
        num_actors: 1,
        segment_len: 4,
        capacity: 4,
        t_old: 1,
        updates_per_round: 3,
        warmup_transitions: 4,
        ..RegimeConfig::fresh_toy()
    };
    let mut l = learner(30);
    l.batch_size = 4;
    let chain = EnvSpec {
        kind: "chain".into(),
        params: Params::from([("length".to_string(), 100.0), ("max_steps".to_string(), 1000.0)]),
    };
    let report = train(&r, &l, &chain, 0, &TrainOptions::default()).unwrap();
    assert!(report.episode_returns.is_empty());
    let newest = report.buffer.iter().map(|t| t.behavior_version).max().unwrap();
    assert!(report.state.version() - newest <= 3);
    for row in &report.metrics {
        assert!(row.old_gap_p95 < 3.0, "gap p95 {}", row.old_gap_p95);
    }
}

#[test]
fn fewer_actors_means_staler_data() {
    let mean_old = |actors: usize| {
        let r = RegimeConfig {
            capacity: 256,
            ..regime(actors)
        };
        let report = train(&r, &learner(60), &env(), 2, &TrainOptions::default()).unwrap();
        let tail = &report.metrics[30..];
        tail.iter().map(|m| m.old_frac).sum::<f64>() / tail.len() as f64
    };
    assert!(mean_old(1) > mean_old(8));
}

#[test]
fn threaded_scheduler_completes() {
    let r = RegimeConfig {
        scheduler: SchedulerMode::Threaded,
        ..regime(3)
    };
    let report = quick(&r, 5, &TrainOptions::default());
    assert_eq!(report.state.version(), 40);
    assert_eq!(report.state.env_steps, report.buffer.inserted());
    assert!(report.state.env_steps >= 32);
}

#[test]
fn artifacts_and_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let options = TrainOptions {
        out_dir: Some(dir.path().to_path_buf()),
        checkpoint_every: 10,
        eval_every: 10,
        dump_replay: true,
    };
    let report = quick(&regime(2), 9, &options);
    let manifest = fs::read_to_string(dir.path().join("manifest.toml")).unwrap();
    assert!(manifest.contains("status = \"completed\""));
    assert!(manifest.contains(&report.manifest.config_hash));
    for step in [10, 20, 30, 40] {
        assert!(dir.path().join(format!("checkpoints/step_{step:08}.ckpt")).exists());
    }
    let restored = TrainState::load(dir.path().join("checkpoints/final.ckpt")).unwrap();
    assert_eq!(restored.model.flat(), report.state.model.flat());
    assert_eq!(restored.version(), report.state.version());
    assert_eq!(restored.env_steps, report.state.env_steps);
    assert_eq!(restored.rng, report.state.rng);

    let replay = ReplayBuffer::load_path(dir.path().join("replay.bin")).unwrap();
    assert_eq!(replay.inserted(), report.buffer.inserted());
    assert!(replay.iter().eq(report.buffer.iter()));

    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 41);
    let evaluated = csv.lines().skip(1).filter(|l| !l.ends_with(',')).count();
    assert_eq!(evaluated, 5);
}

#[test]
fn divergence_aborts_with_dump() {
    let dir = tempfile::tempdir().unwrap();
    let mut l = learner(50);
    l.policy_lr = 1e300;
    l.value_lr = 1e300;
    let options = TrainOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let err = train(&regime(2), &l, &env(), 0, &options).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let manifest = fs::read_to_string(dir.path().join("manifest.toml")).unwrap();
    assert!(manifest.contains("status = \"aborted\""));
    assert!(dir.path().join("abort_dump.txt").exists());
    assert!(dir.path().join("metrics.csv").exists());
}

#[test]
fn learning_improves_exact_return() {
    let mut l = learner(400);
    l.hidden = vec![32];
    let options = TrainOptions {
        eval_every: 50,
        ..Default::default()
    };
    let report = train(&regime(4), &l, &env(), 4, &options).unwrap();
    let returns: Vec<f64> = report.metrics.iter().filter_map(|m| m.avg_return).collect();
    let (first, last) = (returns[0], *returns.last().unwrap());
    assert!(last > first + 0.5, "{first} -> {last}");
    // Four steps is the shortest path, so -sum_{k<4} 0.99^k bounds every policy.
    assert!(last <= -(0..4).map(|k| 0.99f64.powi(k)).sum::<f64>() + 1e-9);
}
