//! Skill-conditioned trajectory diffusion in observation-embedding space:
//! the noise schedule, closed-form forward noising, the temporal U-Net, the
//! condition-dropout training loss and the guided reverse sampler.

mod limits;
mod unet;

pub use limits::Limits;
pub use unet::{from_channels, init_unet, predict_noise, step_features, to_channels};

use crate::config::PlannerConfig;
use crate::error::{ensure, Error, Result};
use crate::numerics::{ParamStore, Rng, Tape, Tensor, Var};

/// Linear beta schedule with cumulative products.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Schedule {
    pub fn linear(n: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config(format!("need at least 2 diffusion steps, got {n}")));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..n)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (n - 1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Schedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn from_config(cfg: &PlannerConfig) -> Result<Self> {
        Self::linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn alpha_bar_prev(&self, i: usize) -> f64 {
        if i == 0 {
            1.0
        } else {
            self.alpha_bars[i - 1]
        }
    }

    /// Coefficients `(c_x0, c_xt, variance)` of the Gaussian posterior
    /// `q(x_{i-1} | x_i, x_0)`.
    pub fn posterior(&self, i: usize) -> (f64, f64, f64) {
        let (b, a, ab) = (self.betas[i], self.alphas[i], self.alpha_bars[i]);
        let abp = self.alpha_bar_prev(i);
        (
            b * abp.sqrt() / (1.0 - ab),
            (1.0 - abp) * a.sqrt() / (1.0 - ab),
            b * (1.0 - abp) / (1.0 - ab),
        )
    }

    /// `sqrt(ᾱ_i) τ0 + sqrt(1 − ᾱ_i) ε`.
    pub fn forward_noise(&self, tau0: &Tensor, i: usize, eps: &Tensor) -> Result<Tensor> {
        ensure!(i < self.len(), Contract, "diffusion step {i} outside [0, {})", self.len());
        let (s, n) = (self.alpha_bars[i].sqrt(), (1.0 - self.alpha_bars[i]).sqrt());
        tau0.zip_map(eps, |x, e| s * x + n * e)
    }
}

/// Guided noise estimate `ε_∅ + ω (ε_y − ε_∅)`.
pub fn cfg_epsilon(eps_null: &Tensor, eps_cond: &Tensor, omega: f64) -> Result<Tensor> {
    eps_null.zip_map(eps_cond, |n, c| n + omega * (c - n))
}

/// Overwrites time index 0 of every row of `x[B, D, T]` with `starts[b]`.
pub fn inpaint(x: &mut Tensor, starts: &[Tensor]) {
    let (d, t) = (x.dim(1), x.dim(2));
    for (b, s) in starts.iter().enumerate() {
        for j in 0..d {
            x.data_mut()[(b * d + j) * t] = s.data()[j];
        }
    }
}

/// One training window: clean embeddings `[plan_len, D]` and which rows are
/// real (the rest are padding).
#[derive(Clone, Debug)]
pub struct Window {
    pub states: Tensor,
    pub valid: Vec<bool>,
}

/// Condition-dropout denoising loss with an arbitrary noise model.
///
/// Each row draws its step and noise, has its first state restored after
/// noising, and has its condition swapped for `null` with probability
/// `dropout`. The loss averages over valid, non-anchored elements.
#[allow(clippy::too_many_arguments)]
pub fn diff_loss_with<M>(
    tape: &mut Tape,
    sched: &Schedule,
    windows: &[Window],
    cond: Var,
    null: Var,
    dropout: f64,
    rng: &mut Rng,
    mut model: M,
) -> Result<Var>
where
    M: FnMut(&mut Tape, Var, &[usize], Var) -> Result<Var>,
{
    ensure!((0.0..=1.0).contains(&dropout), Config, "dropout {dropout} outside [0, 1]");
    ensure!(!windows.is_empty(), Contract, "empty diffusion batch");
    let mut noisy = Vec::with_capacity(windows.len());
    let mut noise = Vec::with_capacity(windows.len());
    let mut steps = Vec::with_capacity(windows.len());
    let mut use_null = Vec::with_capacity(windows.len());
    for w in windows {
        let i = rng.below(sched.len());
        let eps = rng.normal_tensor(w.states.shape(), 1.0);
        noisy.push(sched.forward_noise(&w.states, i, &eps)?);
        noise.push(eps);
        steps.push(i);
        use_null.push(rng.bernoulli(dropout));
    }
    let mut x = to_channels(&noisy)?;
    let starts: Vec<Tensor> = windows.iter().map(|w| Tensor::vector(w.states.row(0))).collect();
    inpaint(&mut x, &starts);
    let target = to_channels(&noise)?;
    let (d, t) = (target.dim(1), target.dim(2));
    let mut mask = vec![0.0; target.len()];
    for (b, w) in windows.iter().enumerate() {
        for j in 0..d {
            for i in 1..t {
                if w.valid[i] {
                    mask[(b * d + j) * t + i] = 1.0;
                }
            }
        }
    }
    let cond = tape.select_rows(cond, null, &use_null)?;
    let x = tape.constant(x);
    let pred = model(tape, x, &steps, cond)?;
    let loss = tape.masked_mse(pred, target, mask)?;
    tape.ensure_finite(loss, "diffusion loss")?;
    Ok(loss)
}

/// [`diff_loss_with`] using the U-Net and learned null condition in `store`.
pub fn diff_loss(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &PlannerConfig,
    sched: &Schedule,
    windows: &[Window],
    cond: Var,
    rng: &mut Rng,
) -> Result<Var> {
    let null = tape.param(store, "diffuser.null_cond")?;
    diff_loss_with(tape, sched, windows, cond, null, cfg.cond_dropout, rng, |t, x, s, c| {
        predict_noise(t, store, cfg, x, s, c)
    })
}

/// Evaluates the U-Net outside of any training graph.
pub fn eval_noise(store: &ParamStore, cfg: &PlannerConfig, x: &Tensor, steps: &[usize], cond: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let cv = tape.constant(cond.clone());
    let out = predict_noise(&mut tape, store, cfg, xv, steps, cv)?;
    Ok(tape.value(out).clone())
}

/// Guided reverse sampling with an arbitrary noise model
/// `eps(x[B, D, T], steps, cond[B, C])`.
///
/// Row `b` draws all of its noise from `rngs[b]`, so a row's plan does not
/// depend on what else is in the batch. `cond = None` runs the purely
/// unconditional sampler.
#[allow(clippy::too_many_arguments)]
pub fn sample_plans_with<M>(
    sched: &Schedule,
    plan_len: usize,
    starts: &[Tensor],
    null: &Tensor,
    cond: Option<&Tensor>,
    omega: f64,
    clip: f64,
    rngs: &mut [Rng],
    mut eps: M,
) -> Result<Vec<Tensor>>
where
    M: FnMut(&Tensor, &[usize], &Tensor) -> Result<Tensor>,
{
    ensure!(omega >= 0.0, Config, "guidance scale must be non-negative");
    ensure!(!starts.is_empty() && starts.len() == rngs.len(), Contract, "one rng per plan required");
    let bsz = starts.len();
    let d = starts[0].len();
    let mut rows = Vec::with_capacity(bsz);
    for r in rngs.iter_mut() {
        rows.push(r.normal_tensor(&[plan_len, d], 1.0));
    }
    let mut x = to_channels(&rows)?;
    inpaint(&mut x, starts);
    let null_rows = Tensor::stack(&vec![null.clone(); bsz])?;
    if let Some(c) = cond {
        c.expect_shape(null_rows.shape())?;
    }
    for i in (0..sched.len()).rev() {
        let steps = vec![i; bsz];
        let e_null = eps(&x, &steps, &null_rows)?;
        let e_hat = match cond {
            Some(c) => cfg_epsilon(&e_null, &eps(&x, &steps, c)?, omega)?,
            None => e_null,
        };
        let ab = sched.alpha_bars()[i];
        let (c0, ct, var) = sched.posterior(i);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut next = Vec::with_capacity(x.len());
        for (&xv, &ev) in x.data().iter().zip(e_hat.data()) {
            let x0 = ((xv - sn * ev) / sa).clamp(-clip, clip);
            next.push(c0 * x0 + ct * xv);
        }
        if i > 0 {
            let sd = var.sqrt();
            let (dd, t) = (x.dim(1), x.dim(2));
            for (b, r) in rngs.iter_mut().enumerate() {
                for v in &mut next[b * dd * t..(b + 1) * dd * t] {
                    *v += sd * r.normal();
                }
            }
        }
        x = Tensor::new(x.shape(), next)?;
        inpaint(&mut x, starts);
    }
    Ok(from_channels(&x))
}

/// Plans from the current embeddings `starts` under conditions `cond`
/// (`[B, cond_dim]`) with the U-Net in `store`.
pub fn sample_plans(
    store: &ParamStore,
    cfg: &PlannerConfig,
    sched: &Schedule,
    starts: &[Tensor],
    cond: Option<&Tensor>,
    omega: f64,
    rngs: &mut [Rng],
) -> Result<Vec<Tensor>> {
    let null = store.value("diffuser.null_cond")?;
    sample_plans_with(sched, cfg.plan_len, starts, null, cond, omega, cfg.sample_clip, rngs, |x, s, c| {
        eval_noise(store, cfg, x, s, c)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_schedule() {
        let s = Schedule::linear(2, 0.1, 0.2).unwrap();
        assert!((s.alphas()[0] - 0.9).abs() < 1e-15 && (s.alphas()[1] - 0.8).abs() < 1e-15);
        assert!((s.alpha_bars()[1] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn schedule_bounds() {
        assert!(matches!(Schedule::linear(1, 0.1, 0.2), Err(Error::Config(_))));
        assert!(Schedule::linear(5, 0.3, 0.2).is_err());
        assert!(Schedule::linear(5, 0.0, 0.2).is_err());
        assert!(Schedule::linear(5, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_noise_without_noise_scales() {
        let s = Schedule::linear(2, 0.1, 0.2).unwrap();
        let out = s.forward_noise(&Tensor::full(&[2, 3], 1.0), 1, &Tensor::zeros(&[2, 3])).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.72f64.sqrt()).abs() < 1e-15));
        assert!(s.forward_noise(&Tensor::zeros(&[1]), 2, &Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn guidance_arithmetic() {
        let n = Tensor::vector(&[1.0, 1.0]);
        let c = Tensor::vector(&[3.0, 1.0]);
        assert_eq!(cfg_epsilon(&n, &c, 0.0).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(cfg_epsilon(&n, &c, 1.0).unwrap().data(), &[3.0, 1.0]);
        assert_eq!(cfg_epsilon(&n, &c, 2.0).unwrap().data(), &[5.0, 1.0]);
    }

    #[test]
    fn posterior_first_step_is_deterministic() {
        let s = Schedule::linear(10, 1e-3, 0.1).unwrap();
        let (c0, ct, var) = s.posterior(0);
        assert!((c0 - 1.0).abs() < 1e-12 && ct.abs() < 1e-15 && var == 0.0);
    }

    #[test]
    fn channel_layout_round_trip() {
        let a = Tensor::new(&[4, 2], (0..8).map(f64::from).collect()).unwrap();
        let b = a.scale(-1.0);
        let x = to_channels(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(x.shape(), &[2, 2, 4]);
        assert_eq!(x.data()[..4], [0.0, 2.0, 4.0, 6.0]);
        assert_eq!(from_channels(&x), vec![a, b]);
    }
}
