//! Skill abstraction: the predictor `f`, the EMA codebook with
//! straight-through quantisation, and the skill embedder `Λ`.

use std::collections::BTreeMap;

use crate::config::PlannerConfig;
use crate::error::{ensure, Error, Result};
use crate::numerics::{apply_affine, init_affine, ParamStore, Rng, Tape, Tensor, Var};

/// Floor on EMA counts when dividing.
pub const EMA_EPS: f64 = 1e-5;
/// Count given to a freshly reseeded code.
pub const RESEED_COUNT: f64 = 1e-3;

pub fn init_predictor(store: &mut ParamStore, cfg: &PlannerConfig, rng: &mut Rng) {
    let e = cfg.skill_embed_dim;
    init_affine(store, "skill.in_lang", cfg.lang_dim, e, rng);
    init_affine(store, "skill.in_obs", cfg.obs_embed_dim, e, rng);
    for p in ["q", "k", "v", "o"] {
        init_affine(store, &format!("skill.attn_{p}"), e, e, rng);
    }
    // softmax ignores a shared shift of the scores, so a key bias is inert
    store.remove("skill.attn_k.b");
    init_affine(store, "skill.ff1", e, cfg.skill_ff_dim, rng);
    init_affine(store, "skill.ff2", cfg.skill_ff_dim, e, rng);
    init_affine(store, "skill.out", e, cfg.code_dim, rng);
}

/// One attention block over the token pair `[instruction, observation]`,
/// a feed-forward layer, mean pooling and a projection to the code width.
/// `obs` is `[B, obs_embed_dim]`, `lang` is `[B, lang_dim]`.
pub fn predict_skill(tape: &mut Tape, store: &ParamStore, cfg: &PlannerConfig, obs: Var, lang: Var) -> Result<Var> {
    let tl = apply_affine(tape, store, "skill.in_lang", lang)?;
    let ts = apply_affine(tape, store, "skill.in_obs", obs)?;
    let x = tape.stack_tokens(tl, ts)?;
    let q = apply_affine(tape, store, "skill.attn_q", x)?;
    let kw = tape.param(store, "skill.attn_k.w")?;
    let kb = tape.constant(Tensor::zeros(&[cfg.skill_embed_dim]));
    let k = tape.affine(x, kw, kb)?;
    let v = apply_affine(tape, store, "skill.attn_v", x)?;
    let a = tape.attention(q, k, v, cfg.skill_heads)?;
    let a = apply_affine(tape, store, "skill.attn_o", a)?;
    let x = tape.add(x, a)?;
    let h = apply_affine(tape, store, "skill.ff1", x)?;
    let h = tape.mish(h);
    let h = apply_affine(tape, store, "skill.ff2", h)?;
    let x = tape.add(x, h)?;
    let pooled = tape.mean_tokens(x)?;
    let z = apply_affine(tape, store, "skill.out", pooled)?;
    tape.ensure_finite(z, "skill latent")?;
    Ok(z)
}

pub fn init_embedder(store: &mut ParamStore, cfg: &PlannerConfig, rng: &mut Rng) {
    init_affine(store, "lambda.l1", cfg.code_dim, cfg.lambda_hidden, rng);
    init_affine(store, "lambda.l2", cfg.lambda_hidden, cfg.cond_dim, rng);
}

/// `Λ(z)`: `[B, code_dim] -> [B, cond_dim]`.
pub fn skill_embed(tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
    let h = apply_affine(tape, store, "lambda.l1", z)?;
    let h = tape.mish(h);
    apply_affine(tape, store, "lambda.l2", h)
}

/// Hidden width at which the flat conditioner has as many scalars as the
/// predictor, embedder and codebook together.
pub fn matched_flat_hidden(cfg: &PlannerConfig) -> usize {
    if cfg.flat_hidden > 0 {
        return cfg.flat_hidden;
    }
    let mut store = ParamStore::new();
    let mut rng = Rng::new(0);
    init_predictor(&mut store, cfg, &mut rng);
    init_embedder(&mut store, cfg, &mut rng);
    let target = store.num_scalars("") + cfg.skill_set_size * cfg.code_dim;
    let din = cfg.lang_dim + cfg.obs_embed_dim;
    // din*h + h + h*cond + cond = target
    ((target - cfg.cond_dim) as f64 / (din + 1 + cfg.cond_dim) as f64).round() as usize
}

pub fn init_flat(store: &mut ParamStore, cfg: &PlannerConfig, rng: &mut Rng) {
    let h = matched_flat_hidden(cfg);
    init_affine(store, "flat.l1", cfg.lang_dim + cfg.obs_embed_dim, h, rng);
    init_affine(store, "flat.l2", h, cfg.cond_dim, rng);
}

/// Ablation condition: a two-layer map of the concatenated embeddings.
pub fn flat_condition(tape: &mut Tape, store: &ParamStore, obs: Var, lang: Var) -> Result<Var> {
    let x = tape.concat_last(lang, obs)?;
    let h = apply_affine(tape, store, "flat.l1", x)?;
    let h = tape.mish(h);
    apply_affine(tape, store, "flat.l2", h)
}

/// Discrete skill set with EMA statistics and per-code idle counters.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    codes: Tensor,
    ema_counts: Tensor,
    ema_sums: Tensor,
    decay: f64,
    /// Updates since each code was last assigned.
    idle: Vec<u64>,
}

impl Codebook {
    /// Codes drawn `N(0, 1/code_dim)`; each starts with unit count so that
    /// an unassigned code keeps its value under EMA.
    pub fn new(k: usize, code_dim: usize, decay: f64, rng: &mut Rng) -> Self {
        let codes = rng.normal_tensor(&[k, code_dim], (1.0 / code_dim as f64).sqrt());
        Codebook {
            ema_counts: Tensor::full(&[k], 1.0),
            ema_sums: codes.clone(),
            codes,
            decay,
            idle: vec![0; k],
        }
    }

    pub fn from_parts(codes: Tensor, ema_counts: Tensor, ema_sums: Tensor, decay: f64) -> Result<Self> {
        ensure!(codes.rank() == 2 && codes.dim(0) > 0, Contract, "codebook needs at least one code");
        let k = codes.dim(0);
        ema_counts.expect_shape(&[k])?;
        ema_sums.expect_shape(codes.shape())?;
        Ok(Codebook {
            codes,
            ema_counts,
            ema_sums,
            decay,
            idle: vec![0; k],
        })
    }

    pub fn len(&self) -> usize {
        self.codes.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn code_dim(&self) -> usize {
        self.codes.dim(1)
    }

    pub fn codes(&self) -> &Tensor {
        &self.codes
    }

    pub fn code(&self, k: usize) -> &[f64] {
        self.codes.row(k)
    }

    pub fn ema_counts(&self) -> &Tensor {
        &self.ema_counts
    }

    pub fn ema_sums(&self) -> &Tensor {
        &self.ema_sums
    }

    pub fn idle(&self) -> &[u64] {
        &self.idle
    }

    /// Nearest code by Euclidean distance, lowest index on ties.
    pub fn quantize(&self, z: &[f64]) -> (usize, &[f64]) {
        let mut best = (0, f64::INFINITY);
        for k in 0..self.len() {
            let d: f64 = self.code(k).iter().zip(z).map(|(c, v)| (c - v) * (c - v)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        (best.0, self.code(best.0))
    }

    /// Quantises each row of `z[B, code_dim]`.
    pub fn quantize_rows(&self, z: &Tensor) -> (Vec<usize>, Tensor) {
        let mut idx = Vec::with_capacity(z.dim(0));
        let mut out = Vec::with_capacity(z.len());
        for i in 0..z.dim(0) {
            let (k, c) = self.quantize(z.row(i));
            idx.push(k);
            out.extend_from_slice(c);
        }
        (idx, Tensor::new(z.shape(), out).expect("same shape as input"))
    }

    /// Mean over rows of `‖q(z̃) − z̃‖²`; the gradient reaches `latent` only.
    pub fn vq_loss(&self, tape: &mut Tape, latent: Var) -> Result<Var> {
        let z = tape.value(latent).clone();
        ensure!(z.rank() == 2 && z.dim(1) == self.code_dim(), Contract, "vq_loss latent shape {:?}", z.shape());
        let (_, q) = self.quantize_rows(&z);
        let q = tape.constant(q);
        let diff = tape.sub(latent, q)?;
        let ss = tape.sum_squares(diff);
        Ok(tape.scale(ss, 1.0 / z.dim(0) as f64))
    }

    /// Quantises `latent` and forwards the codes with a straight-through
    /// gradient path back to `latent`.
    pub fn straight_through(&self, tape: &mut Tape, latent: Var) -> Result<(Vec<usize>, Var)> {
        let (idx, q) = self.quantize_rows(tape.value(latent));
        let v = tape.straight_through(latent, q)?;
        Ok((idx, v))
    }

    /// One EMA step from the assigned batch latents.
    pub fn ema_update(&mut self, latents: &Tensor, indices: &[usize]) -> Result<()> {
        let (k, d) = (self.len(), self.code_dim());
        latents.expect_shape(&[indices.len(), d])?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::Contract(format!("code index {bad} out of range for {k} codes")));
        }
        let mut n = vec![0.0; k];
        let mut sums = vec![0.0; k * d];
        for (row, &i) in indices.iter().enumerate() {
            n[i] += 1.0;
            for (s, v) in sums[i * d..(i + 1) * d].iter_mut().zip(latents.row(row)) {
                *s += v;
            }
        }
        let g = self.decay;
        for i in 0..k {
            let c = &mut self.ema_counts.data_mut()[i];
            *c = g * *c + (1.0 - g) * n[i];
            let count = (*c).max(EMA_EPS);
            for j in 0..d {
                let s = &mut self.ema_sums.data_mut()[i * d + j];
                *s = g * *s + (1.0 - g) * sums[i * d + j];
                self.codes.data_mut()[i * d + j] = *s / count;
            }
            if n[i] > 0.0 {
                self.idle[i] = 0;
            } else {
                self.idle[i] += 1;
            }
        }
        Ok(())
    }

    /// Resets every code idle for at least `threshold` updates to a uniformly
    /// drawn row of `recent`. Returns the reseeded indices.
    pub fn reseed_dead_codes(&mut self, recent: &Tensor, threshold: u64, rng: &mut Rng) -> Result<Vec<usize>> {
        ensure!(recent.rank() == 2 && recent.dim(0) > 0, Contract, "reseeding needs recent latents");
        recent.expect_shape(&[recent.dim(0), self.code_dim()])?;
        let mut done = Vec::new();
        for k in 0..self.len() {
            if self.idle[k] < threshold {
                continue;
            }
            let src = recent.row(rng.below(recent.dim(0))).to_vec();
            self.codes.row_mut(k).copy_from_slice(&src);
            self.ema_counts.data_mut()[k] = RESEED_COUNT;
            for (s, v) in self.ema_sums.row_mut(k).iter_mut().zip(&src) {
                *s = RESEED_COUNT * v;
            }
            self.idle[k] = 0;
            done.push(k);
        }
        Ok(done)
    }

    /// Fraction of codes assigned within the last `window` updates.
    pub fn utilization(&self, window: u64) -> f64 {
        self.idle.iter().filter(|&&i| i < window).count() as f64 / self.len() as f64
    }

    pub fn records(&self) -> Vec<(String, Tensor)> {
        vec![
            ("codebook.codes".into(), self.codes.clone()),
            ("codebook.ema_counts".into(), self.ema_counts.clone()),
            ("codebook.ema_sums".into(), self.ema_sums.clone()),
            ("codebook.decay".into(), Tensor::scalar(self.decay)),
            (
                "codebook.idle".into(),
                Tensor::vector(&self.idle.iter().map(|&i| i as f64).collect::<Vec<_>>()),
            ),
        ]
    }

    pub fn from_records(records: &BTreeMap<String, Tensor>) -> Result<Self> {
        let get = |n: &str| {
            records
                .get(n)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {n}")))
        };
        let mut book = Codebook::from_parts(
            get("codebook.codes")?,
            get("codebook.ema_counts")?,
            get("codebook.ema_sums")?,
            get("codebook.decay")?.item(),
        )?;
        if let Some(idle) = records.get("codebook.idle") {
            idle.expect_shape(&[book.len()])?;
            book.idle = idle.data().iter().map(|&v| v as u64).collect();
        }
        Ok(book)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn book(rows: &[&[f64]]) -> Codebook {
        let codes = Tensor::matrix(rows);
        let k = codes.dim(0);
        Codebook::from_parts(codes.clone(), Tensor::full(&[k], 1.0), codes, 0.99).unwrap()
    }

    #[test]
    fn quantize_nearest_and_ties() {
        let b = book(&[&[0.0, 0.0], &[3.0, 4.0]]);
        assert_eq!(b.quantize(&[0.2, -0.1]).0, 0);
        assert_eq!(b.quantize(&[3.0, 4.0]).0, 1);
        assert_eq!(b.quantize(&[1.5, 2.0]).0, 0);
    }

    #[test]
    fn vq_loss_value_and_gradient() {
        let b = book(&[&[0.0, 0.0]]);
        let mut t = Tape::new();
        let z = t.variable(Tensor::matrix(&[&[3.0, 4.0]]));
        let l = b.vq_loss(&mut t, z).unwrap();
        assert_eq!(t.value(l).item(), 25.0);
        t.backward(l).unwrap();
        assert_eq!(t.grad(z).unwrap().data(), &[6.0, 8.0]);
    }

    #[test]
    fn ema_from_zero_count() {
        let mut b = Codebook::from_parts(
            Tensor::matrix(&[&[1.0, 1.0], &[5.0, 5.0]]),
            Tensor::zeros(&[2]),
            Tensor::zeros(&[2, 2]),
            0.99,
        )
        .unwrap();
        b.ema_update(&Tensor::matrix(&[&[2.0, 4.0]]), &[0]).unwrap();
        assert!((b.ema_counts().data()[0] - 0.01).abs() < 1e-15);
        assert!((b.code(0)[0] - 2.0).abs() < 1e-12 && (b.code(0)[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn unassigned_code_keeps_value() {
        let mut b = book(&[&[0.3, -0.7], &[2.0, 2.0]]);
        b.ema_update(&Tensor::matrix(&[&[2.1, 1.9]]), &[1]).unwrap();
        assert!((b.code(0)[0] - 0.3).abs() < 1e-15 && (b.code(0)[1] + 0.7).abs() < 1e-15);
        assert_eq!(b.idle(), &[1, 0]);
    }

    #[test]
    fn ema_rejects_bad_index() {
        let mut b = book(&[&[0.0]]);
        assert!(matches!(b.ema_update(&Tensor::matrix(&[&[1.0]]), &[1]), Err(Error::Contract(_))));
    }

    #[test]
    fn reseed_only_stale_codes() {
        let mut b = book(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let before = b.clone();
        let recent = Tensor::matrix(&[&[9.0, 9.0]]);
        let mut rng = Rng::new(1);
        assert!(b.reseed_dead_codes(&recent, 3, &mut rng).unwrap().is_empty());
        assert_eq!(b, before);
        for _ in 0..3 {
            b.ema_update(&Tensor::matrix(&[&[1.0, 1.0]]), &[1]).unwrap();
        }
        assert_eq!(b.reseed_dead_codes(&recent, 3, &mut rng).unwrap(), vec![0]);
        assert_eq!(b.quantize(&[9.0, 9.0]).0, 0);
        assert_eq!(b.ema_counts().data()[0], RESEED_COUNT);
    }

    #[test]
    fn records_round_trip() {
        let mut rng = Rng::new(2);
        let mut b = Codebook::new(5, 3, 0.99, &mut rng);
        b.ema_update(&Tensor::matrix(&[&[1.0, 0.0, 0.0]]), &[2]).unwrap();
        let map: BTreeMap<_, _> = b.records().into_iter().collect();
        assert_eq!(Codebook::from_records(&map).unwrap(), b);
    }
}
