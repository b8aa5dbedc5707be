//! Two-optimiser training over demonstration datasets.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::diffusion::{self, Limits, Window};
use crate::error::{Error, Result};
use crate::invdyn::{self, Transitions};
use crate::model::{in_optimizer_a, in_optimizer_b, Planner, TOY_FAMILY};
use crate::numerics::{Rng, Tape, Tensor};
use crate::toyworld::{read_dataset, Dataset};
use crate::PlannerConfig;

pub const METRICS_HEADER: &str = "step,l_vq,l_diff,l_inv,codebook_util";
/// Updates over which a code counts as in use.
pub const UTILIZATION_WINDOW: u64 = 100;
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";

/// Losses and codebook state after one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub step: u64,
    pub l_vq: f64,
    pub l_diff: f64,
    pub l_inv: f64,
    pub codebook_util: f64,
}

impl Metrics {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.4}",
            self.step, self.l_vq, self.l_diff, self.l_inv, self.codebook_util
        )
    }
}

/// A trajectory with its frozen embeddings precomputed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub lang: Tensor,
    /// `[T + 1, obs_embed_dim]`
    pub states: Tensor,
    /// `[T + 1, raw_dim]`
    pub raw: Tensor,
    /// `[T, action_dim]`
    pub actions: Tensor,
}

/// Embeds every trajectory once; the encoders never change during training.
pub fn prepare(planner: &Planner, data: &Dataset) -> Result<Vec<Prepared>> {
    let cfg = &planner.config;
    if data.raw_dim != cfg.raw_dim || data.action_dim != cfg.action_dim {
        return Err(Error::Config(format!(
            "dataset widths raw {} action {} do not match configured raw {} action {}",
            data.raw_dim, data.action_dim, cfg.raw_dim, cfg.action_dim
        )));
    }
    data.trajectories
        .iter()
        .map(|t| {
            Ok(Prepared {
                lang: planner.vocab.encode(&t.tokens)?,
                states: planner.encoder.encode_rows(&t.observations)?,
                raw: t.observations.clone(),
                actions: t.actions.clone(),
            })
        })
        .collect()
}

/// Clean window of `plan_len` embeddings starting at `t0`, padded with the
/// final state.
pub fn window(states: &Tensor, t0: usize, plan_len: usize) -> Window {
    let last = states.dim(0) - 1;
    let d = states.dim(1);
    let mut data = Vec::with_capacity(plan_len * d);
    let mut valid = Vec::with_capacity(plan_len);
    for i in 0..plan_len {
        let t = t0 + i;
        data.extend_from_slice(states.row(t.min(last)));
        valid.push(t <= last);
    }
    Window {
        states: Tensor::new(&[plan_len, d], data).expect("sized above"),
        valid,
    }
}

fn rows(items: impl Iterator<Item = Vec<f64>>, width: usize) -> Tensor {
    let data: Vec<f64> = items.flatten().collect();
    let n = data.len() / width;
    Tensor::new(&[n, width], data).expect("rows share a width")
}

/// One step of both optimisers on a batch drawn from `data` with `rng`.
pub fn train_step(planner: &mut Planner, data: &[Prepared], rng: &Rng) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Input("no trajectories to train on".into()));
    }
    let cfg = planner.config.clone();
    let mut pick = rng.fork_named("batch");
    let batch: Vec<&Prepared> = (0..cfg.batch_size).map(|_| &data[pick.below(data.len())]).collect();

    // skill blocks
    let mut obs = Vec::new();
    let mut lang = Vec::new();
    let mut windows = Vec::new();
    for p in &batch {
        let t_len = p.actions.dim(0);
        for k in 0..cfg.blocks(t_len) {
            let t0 = k * cfg.horizon;
            obs.push(p.states.row(t0).to_vec());
            lang.push(p.lang.data().to_vec());
            let w = window(&p.states, t0, cfg.plan_len);
            windows.push(Window {
                states: planner.limits.normalize(&w.states)?,
                valid: w.valid,
            });
        }
    }
    let obs = rows(obs.into_iter(), cfg.obs_embed_dim);
    let lang = rows(lang.into_iter(), cfg.lang_dim);

    let mut tape = Tape::new();
    let o = tape.constant(obs);
    let l = tape.constant(lang);
    let c = planner.condition(&mut tape, o, l)?;
    let l_diff = diffusion::diff_loss(
        &mut tape,
        &planner.params,
        &cfg,
        &planner.schedule,
        &windows,
        c.cond,
        &mut rng.fork_named("diffusion"),
    )?;
    let weighted = tape.scale(l_diff, cfg.loss_weight);
    let (total, l_vq) = match &c.skill {
        Some((latent, _)) => {
            let vq = planner.codebook.vq_loss(&mut tape, *latent)?;
            tape.ensure_finite(vq, "vector quantisation loss")?;
            (tape.add(vq, weighted)?, tape.value(vq).item())
        }
        None => (weighted, 0.0),
    };
    let l_diff = tape.value(l_diff).item();
    tape.backward(total)?;
    planner.params.accumulate(&tape);

    if let Some((latent, idx)) = &c.skill {
        let z = tape.value(*latent).clone();
        planner.codebook.ema_update(&z, idx)?;
        planner
            .codebook
            .reseed_dead_codes(&z, cfg.staleness_threshold, &mut rng.fork_named("reseed"))?;
    }

    let update_skill = planner.train_step.is_multiple_of(cfg.skill_update_period as u64);
    if !update_skill {
        planner.params.zero_grads_with_prefix("skill.");
    }
    planner.params.adam_step_filtered(
        |n| if n.starts_with("skill.") { cfg.lr_skill } else { cfg.lr_diffuser },
        |n| in_optimizer_a(n) && (update_skill || !n.starts_with("skill.")),
    )?;

    // inverse dynamics on every transition of the batch
    let s = rows(batch.iter().flat_map(|p| (0..p.actions.dim(0)).map(|t| p.states.row(t).to_vec())), cfg.obs_embed_dim);
    let s_next = rows(
        batch.iter().flat_map(|p| (0..p.actions.dim(0)).map(|t| p.states.row(t + 1).to_vec())),
        cfg.obs_embed_dim,
    );
    let raw = rows(batch.iter().flat_map(|p| (0..p.actions.dim(0)).map(|t| p.raw.row(t).to_vec())), cfg.raw_dim);
    let actions = rows(batch.iter().map(|p| p.actions.data().to_vec()), cfg.action_dim);
    let trans = Transitions { s, s_next, raw, actions };
    let mut tape = Tape::new();
    let l_inv = invdyn::inv_loss(&mut tape, &planner.params, TOY_FAMILY, &trans)?;
    tape.backward(l_inv)?;
    planner.params.accumulate(&tape);
    planner.params.adam_step_filtered(|_| cfg.lr_invdyn, in_optimizer_b)?;

    let m = Metrics {
        step: planner.train_step,
        l_vq,
        l_diff,
        l_inv: tape.value(l_inv).item(),
        codebook_util: if c.skill.is_some() { planner.codebook.utilization(UTILIZATION_WINDOW) } else { 0.0 },
    };
    planner.train_step += 1;
    Ok(m)
}

/// Options of one training run.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Continue from `out_dir/checkpoint.bin` if it exists.
    pub resume: bool,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path.display(), e))
}

/// Metrics log lines already written for steps before `upto`.
fn kept_metrics(path: &Path, upto: u64) -> Result<String> {
    let mut out = format!("{METRICS_HEADER}\n");
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
            if step.is_some_and(|s| s < upto) {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

/// Trains on the dataset at `data_path`, writing checkpoints, the metrics
/// log, the vocabulary and the resolved configuration under `out_dir`.
/// All randomness flows from `opts.seed`.
pub fn run_training(data_path: &Path, cfg: &PlannerConfig, opts: &RunOptions) -> Result<Planner> {
    let data = read_dataset(data_path).map_err(|e| Error::Input(format!("cannot read dataset {}: {e}", data_path.display())))?;
    if data.trajectories.is_empty() {
        return Err(Error::Input(format!("dataset {} holds no trajectories", data_path.display())));
    }
    let checkpoint = opts.out_dir.join(CHECKPOINT_FILE);
    let mut planner = if opts.resume && checkpoint.exists() {
        // only the schedule length may change between runs
        let saved = PlannerConfig::load(&opts.out_dir.join("config.txt"))?;
        let comparable = PlannerConfig {
            train_steps: cfg.train_steps,
            checkpoint_every: cfg.checkpoint_every,
            ..saved
        };
        if comparable != *cfg {
            return Err(Error::Config("resumed run was trained with a different configuration".into()));
        }
        Planner::load(&checkpoint, cfg)?
    } else {
        Planner::new(cfg, opts.seed)?
    };
    let prepared = prepare(&planner, &data)?;
    if planner.train_step == 0 {
        planner.limits = Limits::fit(prepared.iter().map(|p| &p.states))?;
    }
    fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(opts.out_dir.display(), e))?;
    write(&opts.out_dir.join("config.txt"), cfg.to_text())?;
    write(&opts.out_dir.join("vocab.txt"), planner.vocab.to_text())?;

    let metrics_path = opts.out_dir.join(METRICS_FILE);
    let mut log = kept_metrics(&metrics_path, planner.train_step)?;
    let base = Rng::new(opts.seed).fork_named("train");
    while (planner.train_step as usize) < cfg.train_steps {
        let step_rng = base.fork(planner.train_step);
        let m = train_step(&mut planner, &prepared, &step_rng)?;
        let _ = writeln!(log, "{}", m.csv_line());
        let done = planner.train_step as usize;
        if cfg.checkpoint_every > 0 && done.is_multiple_of(cfg.checkpoint_every) {
            planner.save(&opts.out_dir.join(format!("checkpoint-{done:06}.bin")))?;
            if done < cfg.train_steps {
                planner.save(&checkpoint)?;
                write(&metrics_path, &log)?;
            }
        }
    }
    planner.save(&checkpoint)?;
    write(&metrics_path, &log)?;
    Ok(planner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_pads_with_final_state() {
        let states = Tensor::new(&[3, 1], vec![0.0, 1.0, 2.0]).unwrap();
        let w = window(&states, 1, 4);
        assert_eq!(w.states.data(), &[1.0, 2.0, 2.0, 2.0]);
        assert_eq!(w.valid, vec![true, true, false, false]);
    }

    #[test]
    fn kept_metrics_drops_later_steps() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, format!("{METRICS_HEADER}\n0,a\n1,b\n2,c\n")).unwrap();
        assert_eq!(kept_metrics(&p, 2).unwrap(), format!("{METRICS_HEADER}\n0,a\n1,b\n"));
    }
}
