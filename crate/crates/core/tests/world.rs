use skillplan::numerics::Rng;
use skillplan::toyworld::{expert_episode, Env, Mixing, Task, ToyEnv, WorldState, STATE_DIM};

fn rank(mut m: Vec<Vec<f64>>) -> usize {
    let cols = m[0].len();
    let mut r = 0;
    for c in 0..cols {
        let Some(p) = (r..m.len()).max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs())) else { break };
        if m[p][c].abs() < 1e-9 {
            continue;
        }
        m.swap(r, p);
        for i in 0..m.len() {
            if i != r {
                let f = m[i][c] / m[r][c];
                let pivot = m[r].clone();
                for (x, y) in m[i].iter_mut().zip(pivot) {
                    *x -= f * y;
                }
            }
        }
        r += 1;
    }
    r
}

#[test]
fn mixing_keeps_every_state_coordinate() {
    let m = Mixing::new(16, 11);
    let rows: Vec<Vec<f64>> = (0..16).map(|i| m.matrix().row(i).to_vec()).collect();
    assert_eq!(rank(rows), STATE_DIM);
    assert_eq!(m, Mixing::new(16, 11));
    assert_ne!(m, Mixing::new(16, 12));
}

#[test]
fn noisy_expert_lands_in_the_target_band() {
    for task in Task::ALL {
        let root = Rng::new(21).fork(task.id() as u64);
        let n = 400;
        let wins = (0..n).filter(|&i| expert_episode(task, 0.3, 20, &mut root.fork(i))).count();
        let rate = wins as f64 / n as f64;
        assert!((0.5..=0.9).contains(&rate), "{task:?} {rate}");
        let clean = (n..n + 50).all(|i| expert_episode(task, 0.0, 20, &mut root.fork(i)));
        assert!(clean, "{task:?}");
    }
}

#[test]
fn observation_noise_has_the_configured_scale() {
    let mixing = Mixing::new(16, 11);
    let mut rng = Rng::new(3);
    let mut env = ToyEnv::new(Task::FaucetLeft, mixing.clone(), 0.1, &mut rng.clone());
    let clean = mixing.apply(&WorldState::reset(Task::FaucetLeft, &mut rng));
    let mut sq = 0.0;
    let mut n = 0.0;
    for _ in 0..500 {
        for (o, c) in env.observe().iter().zip(&clean) {
            sq += (o - c).powi(2);
            n += 1.0;
        }
    }
    let std = (sq / n).sqrt();
    assert!((std - 0.1).abs() < 0.005, "{std}");
}

#[test]
fn success_is_sticky() {
    let mut rng = Rng::new(4);
    let mut env = ToyEnv::new(Task::CloseDrawer, Mixing::new(16, 11), 0.0, &mut rng);
    assert!(!env.succeeded());
    let mut act = Rng::new(5);
    let mut state = WorldState::reset(Task::CloseDrawer, &mut Rng::new(4));
    let mut hit = false;
    for _ in 0..40 {
        let a = skillplan::toyworld::scripted_expert(Task::CloseDrawer, &state, &mut act, 0.0);
        env.step(&a).unwrap();
        state = state.step(&a).unwrap();
        hit |= env.succeeded();
        if hit {
            assert!(env.succeeded());
        }
    }
    assert!(hit);
    // move away; the flag stays
    for _ in 0..10 {
        env.step(&[1.0, -1.0, 1.0, 0.0]).unwrap();
    }
    assert!(env.succeeded());
}
