//! Finite-difference checks of every differentiable piece, at small sizes.

use crate::config::PlannerConfig;
use crate::diffusion::{self, Schedule, Window};
use crate::error::Result;
use crate::invdyn::{self, Transitions};
use crate::numerics::{all_coords, finite_difference_check, sample_coords, ParamStore, Rng, Tape, Tensor, Var};
use crate::skill;

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

/// Worst relative error of one check across all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: &'static str,
    pub seeds: usize,
    pub worst: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.worst < GRAD_TOLERANCE
    }
}

/// Dimensions small enough to difference every coordinate.
pub fn small_config() -> PlannerConfig {
    PlannerConfig {
        raw_dim: 5,
        obs_embed_dim: 4,
        lang_dim: 6,
        skill_set_size: 4,
        code_dim: 3,
        skill_embed_dim: 8,
        skill_heads: 2,
        skill_ff_dim: 10,
        lambda_hidden: 7,
        cond_dim: 5,
        diffusion_steps: 10,
        plan_len: 8,
        horizon: 4,
        unet_channels: 4,
        unet_mid_channels: 8,
        conv_width: 3,
        norm_groups: 2,
        time_embed_dim: 6,
        action_dim: 3,
        invdyn_hidden: 9,
        ..PlannerConfig::default()
    }
}

/// `sum(out * weights)` with fixed random weights, so no output coordinate
/// is symmetric with another.
fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn check_affine(rng: &mut Rng) -> Result<f64> {
    let mut s = ParamStore::new();
    s.insert("x", rng.normal_tensor(&[3, 5], 1.0));
    s.insert("w", rng.normal_tensor(&[5, 4], 1.0));
    s.insert("b", rng.normal_tensor(&[4], 1.0));
    let r = rng.normal_tensor(&[3, 4], 1.0);
    finite_difference_check(&s, FD_STEP, &all_coords(&s, ""), |t, st| {
        let (x, w, b) = (t.param(st, "x")?, t.param(st, "w")?, t.param(st, "b")?);
        let y = t.affine(x, w, b)?;
        weighted_sum(t, y, &r)
    })
}

fn check_conv(rng: &mut Rng) -> Result<f64> {
    let mut s = ParamStore::new();
    s.insert("x", rng.normal_tensor(&[2, 3, 8], 1.0));
    s.insert("k", rng.normal_tensor(&[4, 3, 5], 1.0));
    let r = rng.normal_tensor(&[2, 4, 8], 1.0);
    finite_difference_check(&s, FD_STEP, &all_coords(&s, ""), |t, st| {
        let (x, k) = (t.param(st, "x")?, t.param(st, "k")?);
        let y = t.conv1d(x, k)?;
        weighted_sum(t, y, &r)
    })
}

fn check_group_norm(rng: &mut Rng) -> Result<f64> {
    let mut s = ParamStore::new();
    s.insert("x", rng.normal_tensor(&[2, 4, 6], 1.0));
    s.insert("g", rng.normal_tensor(&[4], 1.0));
    s.insert("b", rng.normal_tensor(&[4], 1.0));
    let r = rng.normal_tensor(&[2, 4, 6], 1.0);
    finite_difference_check(&s, FD_STEP, &all_coords(&s, ""), |t, st| {
        let (x, g, b) = (t.param(st, "x")?, t.param(st, "g")?, t.param(st, "b")?);
        let y = t.group_norm(x, 2, g, b)?;
        weighted_sum(t, y, &r)
    })
}

fn check_mish(rng: &mut Rng) -> Result<f64> {
    let mut s = ParamStore::new();
    s.insert("x", rng.normal_tensor(&[3, 7], 2.0));
    let r = rng.normal_tensor(&[3, 7], 1.0);
    finite_difference_check(&s, FD_STEP, &all_coords(&s, ""), |t, st| {
        let x = t.param(st, "x")?;
        let y = t.mish(x);
        weighted_sum(t, y, &r)
    })
}

fn check_predictor(cfg: &PlannerConfig, rng: &mut Rng) -> Result<f64> {
    let mut s = ParamStore::new();
    skill::init_predictor(&mut s, cfg, rng);
    let obs = rng.normal_tensor(&[3, cfg.obs_embed_dim], 1.0);
    let lang = rng.normal_tensor(&[3, cfg.lang_dim], 1.0);
    let r = rng.normal_tensor(&[3, cfg.code_dim], 1.0);
    finite_difference_check(&s, FD_STEP, &all_coords(&s, "skill."), |t, st| {
        let (o, l) = (t.constant(obs.clone()), t.constant(lang.clone()));
        let z = skill::predict_skill(t, st, cfg, o, l)?;
        weighted_sum(t, z, &r)
    })
}

fn check_embedder(cfg: &PlannerConfig, rng: &mut Rng) -> Result<f64> {
    let mut s = ParamStore::new();
    skill::init_embedder(&mut s, cfg, rng);
    s.insert("z", rng.normal_tensor(&[3, cfg.code_dim], 1.0));
    let r = rng.normal_tensor(&[3, cfg.cond_dim], 1.0);
    finite_difference_check(&s, FD_STEP, &all_coords(&s, ""), |t, st| {
        let z = t.param(st, "z")?;
        let y = skill::skill_embed(t, st, z)?;
        weighted_sum(t, y, &r)
    })
}

fn check_noise_model(cfg: &PlannerConfig, rng: &mut Rng) -> Result<f64> {
    let mut s = ParamStore::new();
    diffusion::init_unet(&mut s, cfg, rng);
    // perturb gains and biases away from their exact initial values
    for name in s.names().map(String::from).collect::<Vec<_>>() {
        if name.contains(".gn") {
            let v = s.value_mut(&name)?;
            for x in v.data_mut() {
                *x += 0.3 * rng.normal();
            }
        }
    }
    s.insert("cond", rng.normal_tensor(&[3, cfg.cond_dim], 1.0));
    let sched = Schedule::from_config(cfg)?;
    let windows: Vec<Window> = (0..3)
        .map(|i| Window {
            states: rng.normal_tensor(&[cfg.plan_len, cfg.obs_embed_dim], 1.0),
            valid: (0..cfg.plan_len).map(|j| j < cfg.plan_len - i).collect(),
        })
        .collect();
    let stream = rng.fork_named("diffusion-loss");
    let coords = sample_coords(&s, "", 0.25, rng);
    finite_difference_check(&s, FD_STEP, &coords, |t, st| {
        let cond = t.param(st, "cond")?;
        let null = t.param(st, "diffuser.null_cond")?;
        diffusion::diff_loss_with(t, &sched, &windows, cond, null, 0.5, &mut stream.clone(), |t, x, steps, c| {
            diffusion::predict_noise(t, st, cfg, x, steps, c)
        })
    })
}

fn check_invdyn(cfg: &PlannerConfig, rng: &mut Rng) -> Result<f64> {
    let mut s = ParamStore::new();
    invdyn::init(&mut s, cfg, "check", rng);
    let n = 4;
    let batch = Transitions {
        s: rng.normal_tensor(&[n, cfg.obs_embed_dim], 1.0),
        s_next: rng.normal_tensor(&[n, cfg.obs_embed_dim], 1.0),
        raw: rng.normal_tensor(&[n, cfg.raw_dim], 1.0),
        actions: rng.normal_tensor(&[n, cfg.action_dim], 1.0),
    };
    finite_difference_check(&s, FD_STEP, &all_coords(&s, ""), |t, st| invdyn::inv_loss(t, st, "check", &batch))
}

type Check = fn(&PlannerConfig, &mut Rng) -> Result<f64>;

/// Every check for `seeds` seeds derived from `base_seed`.
pub fn run_suite(base_seed: u64, seeds: usize) -> Result<Vec<GradReport>> {
    let cfg = small_config();
    let checks: [(&'static str, Check); 8] = [
        ("affine", |_, r| check_affine(r)),
        ("conv1d_temporal", |_, r| check_conv(r)),
        ("group_norm", |_, r| check_group_norm(r)),
        ("mish", |_, r| check_mish(r)),
        ("skill_predictor", check_predictor),
        ("skill_embedder", check_embedder),
        ("noise_model", check_noise_model),
        ("inverse_dynamics", check_invdyn),
    ];
    let root = Rng::new(base_seed).fork_named("gradcheck");
    checks
        .iter()
        .map(|(name, f)| {
            let mut worst: f64 = 0.0;
            for s in 0..seeds {
                let mut rng = root.fork_named(name).fork(s as u64);
                worst = worst.max(f(&cfg, &mut rng)?);
            }
            Ok(GradReport {
                name,
                seeds,
                worst,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_seed_passes() {
        for r in run_suite(3, 2).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }
}
