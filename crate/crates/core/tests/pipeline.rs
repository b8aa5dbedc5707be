mod common;

use std::fs;

use common::{tiny_config, write_tiny_dataset};
use skillplan::eval::{eval_csv, evaluate, EVAL_HEADER};
use skillplan::model::{in_optimizer_a, in_optimizer_b, Planner};
use skillplan::numerics::{ParamStore, Rng};
use skillplan::rollout::{rollout_episode, Agent, PlannerAgent, RandomAgent};
use skillplan::toyworld::{read_dataset, sample_instruction, Dataset, Family, Mixing, Task, ToyEnv};
use skillplan::training::{prepare, run_training, train_step, RunOptions, METRICS_HEADER};
use skillplan::{Error, PlannerConfig};

fn snapshot(p: &ParamStore, keep: impl Fn(&str) -> bool) -> Vec<(String, Vec<f64>)> {
    p.names()
        .filter(|n| keep(n))
        .map(|n| (n.to_string(), p.value(n).unwrap().data().to_vec()))
        .collect()
}

fn one_step(cfg: &PlannerConfig) -> (Planner, Planner) {
    let dir = tempfile::tempdir().unwrap();
    let data = read_dataset(&write_tiny_dataset(dir.path(), cfg, 6)).unwrap();
    let mut p = Planner::new(cfg, 3).unwrap();
    let before = Planner::new(cfg, 3).unwrap();
    let prepared = prepare(&p, &data).unwrap();
    train_step(&mut p, &prepared, &Rng::new(1)).unwrap();
    (before, p)
}

#[test]
fn optimizer_groups_partition_the_parameters() {
    for flat in [false, true] {
        let p = Planner::new(&PlannerConfig { flat, ..tiny_config() }, 0).unwrap();
        for n in p.params.names() {
            assert!(in_optimizer_a(n) ^ in_optimizer_b(n), "{n}");
        }
        assert_eq!(p.optimizer_a_names().len() + p.optimizer_b_names().len(), p.params.len());
    }
}

#[test]
fn zero_loss_weight_leaves_the_diffuser_untouched() {
    let cfg = PlannerConfig { loss_weight: 0.0, ..tiny_config() };
    let (before, after) = one_step(&cfg);
    let diffuser = |n: &str| n.starts_with("diffuser.") || n.starts_with("lambda.");
    assert_eq!(snapshot(&before.params, diffuser), snapshot(&after.params, diffuser));
    // step 0 is a predictor update step and the VQ term still reaches it
    let skill = |n: &str| n.starts_with("skill.");
    assert_ne!(snapshot(&before.params, skill), snapshot(&after.params, skill));
}

#[test]
fn inverse_dynamics_trains_only_through_its_own_optimizer() {
    let cfg = PlannerConfig { lr_skill: 0.0, lr_diffuser: 0.0, ..tiny_config() };
    let (before, after) = one_step(&cfg);
    assert_eq!(snapshot(&before.params, in_optimizer_a), snapshot(&after.params, in_optimizer_a));
    assert_ne!(snapshot(&before.params, in_optimizer_b), snapshot(&after.params, in_optimizer_b));

    let cfg = PlannerConfig { lr_invdyn: 0.0, ..tiny_config() };
    let (before, after) = one_step(&cfg);
    assert_eq!(snapshot(&before.params, in_optimizer_b), snapshot(&after.params, in_optimizer_b));
}

#[test]
fn predictor_is_frozen_between_update_steps() {
    let cfg = PlannerConfig { skill_update_period: 3, ..tiny_config() };
    let dir = tempfile::tempdir().unwrap();
    let data = read_dataset(&write_tiny_dataset(dir.path(), &cfg, 6)).unwrap();
    let mut p = Planner::new(&cfg, 3).unwrap();
    let prepared = prepare(&p, &data).unwrap();
    let skill = |n: &str| n.starts_with("skill.");
    let mut history = vec![snapshot(&p.params, skill)];
    for s in 0..4 {
        train_step(&mut p, &prepared, &Rng::new(s)).unwrap();
        history.push(snapshot(&p.params, skill));
    }
    // updates land on steps 0 and 3
    assert_ne!(history[0], history[1]);
    assert_eq!(history[1], history[2]);
    assert_eq!(history[2], history[3]);
    assert_ne!(history[3], history[4]);
}

#[test]
fn frozen_encoders_are_not_parameters() {
    let p = Planner::new(&tiny_config(), 0).unwrap();
    let vocab_before = p.vocab.to_text();
    let proj_before = p.encoder.projection().clone();
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let data = write_tiny_dataset(dir.path(), &cfg, 6);
    let out = dir.path().join("run");
    let trained = run_training(&data, &cfg, &RunOptions { seed: 0, out_dir: out.clone(), resume: false }).unwrap();
    assert_eq!(trained.vocab.to_text(), vocab_before);
    assert_eq!(trained.encoder.projection(), &proj_before);
    assert_eq!(fs::read_to_string(out.join("vocab.txt")).unwrap(), vocab_before);
}

#[test]
fn empty_dataset_fails_before_writing_anything() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let empty = Dataset {
        episode_len: cfg.episode_len,
        raw_dim: cfg.raw_dim,
        action_dim: cfg.action_dim,
        trajectories: Vec::new(),
    };
    let path = dir.path().join("empty.skdd");
    skillplan::toyworld::write_dataset(&path, &empty).unwrap();
    let out = dir.path().join("run");
    let err = run_training(&path, &cfg, &RunOptions { seed: 0, out_dir: out.clone(), resume: false }).unwrap_err();
    assert!(matches!(err, Error::Input(_)), "{err}");
    assert!(!out.exists());

    let err = run_training(&dir.path().join("missing.skdd"), &cfg, &RunOptions { seed: 0, out_dir: out.clone(), resume: false })
        .unwrap_err();
    assert!(matches!(err, Error::Input(_)), "{err}");
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let data = write_tiny_dataset(dir.path(), &cfg, 12);
    let straight = dir.path().join("straight");
    run_training(&data, &cfg, &RunOptions { seed: 5, out_dir: straight.clone(), resume: false }).unwrap();

    let split = dir.path().join("split");
    let first = PlannerConfig { train_steps: 3, ..cfg.clone() };
    run_training(&data, &first, &RunOptions { seed: 5, out_dir: split.clone(), resume: false }).unwrap();
    let p = run_training(&data, &cfg, &RunOptions { seed: 5, out_dir: split.clone(), resume: true }).unwrap();
    assert_eq!(p.train_step, 6);

    for f in ["checkpoint.bin", "metrics.csv", "checkpoint-000003.bin"] {
        assert_eq!(fs::read(straight.join(f)).unwrap(), fs::read(split.join(f)).unwrap(), "{f}");
    }
    let metrics = fs::read_to_string(split.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with(METRICS_HEADER));
    assert_eq!(metrics.lines().count(), 7);

    let changed = PlannerConfig { lr_diffuser: 0.5, ..cfg };
    let err = run_training(&data, &changed, &RunOptions { seed: 5, out_dir: split, resume: true }).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn diffusion_limits_are_fitted_to_the_training_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PlannerConfig { train_steps: 1, ..tiny_config() };
    let data = write_tiny_dataset(dir.path(), &cfg, 12);
    let p = run_training(&data, &cfg, &RunOptions { seed: 3, out_dir: dir.path().join("run"), resume: false }).unwrap();
    let prepared = prepare(&p, &read_dataset(&data).unwrap()).unwrap();
    let (mut lo, mut hi) = (vec![f64::MAX; cfg.obs_embed_dim], vec![f64::MIN; cfg.obs_embed_dim]);
    for t in &prepared {
        let n = p.limits.normalize(&t.states).unwrap();
        for row in n.data().chunks(cfg.obs_embed_dim) {
            for (j, v) in row.iter().enumerate() {
                lo[j] = lo[j].min(*v);
                hi[j] = hi[j].max(*v);
            }
        }
    }
    assert!(lo.iter().all(|v| (v + 1.0).abs() < 1e-9), "{lo:?}");
    assert!(hi.iter().all(|v| (v - 1.0).abs() < 1e-9), "{hi:?}");
    assert_eq!(Planner::load(&dir.path().join("run/checkpoint.bin"), &cfg).unwrap().limits, p.limits);

    // plans come back in embedding space, anchored on the observation itself
    let raw = read_dataset(&data).unwrap().trajectories[0].observations.row(0).to_vec();
    let instr = vec![vec!["open".to_string(), "drawer".to_string()]];
    let blocks = PlannerAgent::new(&p).plan(std::slice::from_ref(&raw), &instr, &mut [Rng::new(1)]).unwrap();
    assert_eq!(blocks[0].plan.row(0), p.encoder.encode(&raw).unwrap().data());
}

#[test]
fn mismatched_checkpoints_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let path = dir.path().join("p.bin");
    Planner::new(&cfg, 1).unwrap().save(&path).unwrap();
    assert!(Planner::load(&path, &cfg).is_ok());
    for other in [
        PlannerConfig { skill_set_size: 5, ..cfg.clone() },
        PlannerConfig { flat: true, ..cfg.clone() },
        PlannerConfig { invdyn_hidden: 17, ..cfg.clone() },
    ] {
        let err = Planner::load(&path, &other).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }
}

#[test]
fn checkpoints_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let (_, trained) = one_step(&cfg);
    let path = dir.path().join("p.bin");
    trained.save(&path).unwrap();
    let back = Planner::load(&path, &cfg).unwrap();
    assert_eq!(back.records(), trained.records());
    assert_eq!(back.train_step, 1);
}

#[test]
fn flat_ablation_matches_the_parameter_budget() {
    let full = Planner::new(&PlannerConfig::default(), 0).unwrap().num_parameters() as f64;
    let flat = Planner::new(&PlannerConfig { flat: true, ..PlannerConfig::default() }, 0).unwrap().num_parameters() as f64;
    assert!((full - flat).abs() / full <= 0.10, "full {full} flat {flat}");
}

#[test]
fn skills_hold_for_a_block_and_actions_stay_in_the_box() {
    let cfg = tiny_config();
    let p = Planner::new(&cfg, 2).unwrap();
    let agent = PlannerAgent::new(&p);
    let mut rng = Rng::new(8);
    let mut env = ToyEnv::new(Task::OpenDrawer, Mixing::from_config(&cfg), cfg.obs_noise, &mut rng);
    let instr = sample_instruction(Task::OpenDrawer, Family::Seen, &mut rng);
    let r = rollout_episode(&agent, &mut env, &instr, 10, cfg.horizon, &mut rng).unwrap();
    assert_eq!(r.steps(), 10);
    assert_eq!(r.observations.len(), 11);
    for block in r.skills.chunks(cfg.horizon) {
        assert!(block[0].is_some());
        assert!(block.iter().all(|s| *s == block[0]));
    }
    for a in &r.actions {
        assert_eq!(a.len(), cfg.action_dim);
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn evaluation_is_deterministic_and_paired() {
    let cfg = tiny_config();
    let p = Planner::new(&cfg, 2).unwrap();
    let agent = PlannerAgent::new(&p);
    let fams = [Family::Seen, Family::UnseenVerb];
    let (a, la) = evaluate(&agent, &cfg, &fams, &[1, 2], 2).unwrap();
    let (b, _) = evaluate(&agent, &cfg, &fams, &[1, 2], 2).unwrap();
    assert_eq!(eval_csv(&a), eval_csv(&b));
    assert_eq!(a.len(), Task::ALL.len() * fams.len() * 2);
    // families share start states
    for e in la.iter().filter(|e| e.family == Family::Seen) {
        let twin = la
            .iter()
            .find(|o| o.family == Family::UnseenVerb && o.task == e.task && o.seed == e.seed && o.index == e.index)
            .unwrap();
        assert_eq!(e.result.observations[0], twin.result.observations[0]);
    }
}

#[test]
fn zero_episodes_yield_only_a_header() {
    let cfg = tiny_config();
    let (cells, log) = evaluate(&RandomAgent { action_dim: 4 }, &cfg, &Family::ALL, &[1], 0).unwrap();
    assert!(log.is_empty());
    assert_eq!(eval_csv(&cells), format!("{EVAL_HEADER}\n"));
}
