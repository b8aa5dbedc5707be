//! Task-specific inverse dynamics `Ψ([s_t, s_{t+1}], i_t) -> a_t`.

use crate::config::PlannerConfig;
use crate::error::{Error, Result};
use crate::numerics::{apply_affine, init_affine, ParamStore, Rng, Tape, Tensor, Var};

pub fn prefix(family: &str) -> String {
    format!("invdyn.{family}")
}

pub fn init(store: &mut ParamStore, cfg: &PlannerConfig, family: &str, rng: &mut Rng) {
    let p = prefix(family);
    init_affine(store, &format!("{p}.l1"), 2 * cfg.obs_embed_dim + cfg.raw_dim, cfg.invdyn_hidden, rng);
    init_affine(store, &format!("{p}.l2"), cfg.invdyn_hidden, cfg.action_dim, rng);
}

/// Batched forward on `[B, obs]`, `[B, obs]`, `[B, raw]`; no clipping.
pub fn forward(tape: &mut Tape, store: &ParamStore, family: &str, s: Var, s_next: Var, raw: Var) -> Result<Var> {
    let p = prefix(family);
    let pair = tape.concat_last(s, s_next)?;
    let x = tape.concat_last(pair, raw)?;
    let h = apply_affine(tape, store, &format!("{p}.l1"), x)?;
    let h = tape.mish(h);
    apply_affine(tape, store, &format!("{p}.l2"), h)
}

/// Transition batch for behaviour cloning.
#[derive(Clone, Debug)]
pub struct Transitions {
    pub s: Tensor,
    pub s_next: Tensor,
    pub raw: Tensor,
    pub actions: Tensor,
}

impl Transitions {
    pub fn len(&self) -> usize {
        self.s.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Element-mean squared error between predicted and demonstrated actions.
pub fn inv_loss(tape: &mut Tape, store: &ParamStore, family: &str, batch: &Transitions) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Input("empty transition batch".into()));
    }
    let s = tape.constant(batch.s.clone());
    let sn = tape.constant(batch.s_next.clone());
    let raw = tape.constant(batch.raw.clone());
    let pred = forward(tape, store, family, s, sn, raw)?;
    let loss = tape.mse(pred, batch.actions.clone())?;
    tape.ensure_finite(loss, "inverse dynamics loss")?;
    Ok(loss)
}

/// Inference for whole batches of rows; actions are clipped to `[-1, 1]`.
pub fn infer_actions(
    store: &ParamStore,
    cfg: &PlannerConfig,
    family: &str,
    s: &Tensor,
    s_next: &Tensor,
    raw: &Tensor,
) -> Result<Tensor> {
    let widths = [
        (s.shape().last(), cfg.obs_embed_dim, "state"),
        (s_next.shape().last(), cfg.obs_embed_dim, "next state"),
        (raw.shape().last(), cfg.raw_dim, "observation"),
    ];
    for (got, want, what) in widths {
        if got != Some(&want) {
            return Err(Error::Config(format!("{what} width {got:?} does not match configured {want}")));
        }
    }
    let mut tape = Tape::new();
    let (a, b, c) = (tape.constant(s.clone()), tape.constant(s_next.clone()), tape.constant(raw.clone()));
    let out = forward(&mut tape, store, family, a, b, c)?;
    tape.ensure_finite(out, "action")?;
    Ok(tape.value(out).map(|v| v.clamp(-1.0, 1.0)))
}

/// Single-transition convenience over [`infer_actions`].
pub fn infer_action(
    store: &ParamStore,
    cfg: &PlannerConfig,
    family: &str,
    s: &[f64],
    s_next: &[f64],
    raw: &[f64],
) -> Result<Vec<f64>> {
    let row = |v: &[f64]| Tensor::new(&[1, v.len()], v.to_vec());
    Ok(infer_actions(store, cfg, family, &row(s)?, &row(s_next)?, &row(raw)?)?.into_data())
}
