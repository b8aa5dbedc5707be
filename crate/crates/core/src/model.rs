//! Everything a trained planner consists of, plus checkpoint I/O.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::PlannerConfig;
use crate::diffusion::{self, Limits, Schedule};
use crate::encoders::{ObservationEncoder, Vocabulary};
use crate::error::{Error, Result};
use crate::invdyn;
use crate::numerics::{read_tensor_file, write_tensor_file, ParamStore, Rng, Tape, Tensor, Var};
use crate::skill::{self, Codebook};
use crate::toyworld;

/// Inverse dynamics family name used for the toy world.
pub const TOY_FAMILY: &str = "toyworld";

/// Parameter prefixes stepped by the planner optimiser.
pub const OPTIMIZER_A_PREFIXES: [&str; 4] = ["skill.", "lambda.", "diffuser.", "flat."];
/// Parameter prefix stepped by the inverse dynamics optimiser.
pub const OPTIMIZER_B_PREFIX: &str = "invdyn.";

const TRAIN_STEP_KEY: &str = "#train_step";

pub fn in_optimizer_a(name: &str) -> bool {
    OPTIMIZER_A_PREFIXES.iter().any(|p| name.starts_with(p))
}

pub fn in_optimizer_b(name: &str) -> bool {
    name.starts_with(OPTIMIZER_B_PREFIX)
}

/// Conditioning produced for a batch of (observation, instruction) rows.
pub struct Conditioning {
    pub cond: Var,
    /// Pre-quantisation latents and chosen codes; absent for the flat variant.
    pub skill: Option<(Var, Vec<usize>)>,
}

#[derive(Clone, Debug)]
pub struct Planner {
    pub config: PlannerConfig,
    pub params: ParamStore,
    pub codebook: Codebook,
    pub vocab: Vocabulary,
    pub encoder: ObservationEncoder,
    pub schedule: Schedule,
    /// Map of embeddings into the diffuser's space, fitted on the training data.
    pub limits: Limits,
    /// Completed training steps.
    pub train_step: u64,
}

impl Planner {
    /// Fresh initialisation; all randomness flows from `seed`.
    pub fn new(config: &PlannerConfig, seed: u64) -> Result<Planner> {
        config.validate()?;
        let cfg = config.clone();
        let root = Rng::new(seed);
        let mut params = ParamStore::new();
        if cfg.flat {
            skill::init_flat(&mut params, &cfg, &mut root.fork_named("flat"));
        } else {
            skill::init_predictor(&mut params, &cfg, &mut root.fork_named("skill"));
            skill::init_embedder(&mut params, &cfg, &mut root.fork_named("lambda"));
        }
        diffusion::init_unet(&mut params, &cfg, &mut root.fork_named("diffuser"));
        invdyn::init(&mut params, &cfg, TOY_FAMILY, &mut root.fork_named("invdyn"));
        let codebook = Codebook::new(cfg.skill_set_size, cfg.code_dim, cfg.ema_decay, &mut root.fork_named("codebook"));
        Ok(Planner {
            vocab: Vocabulary::new(toyworld::lexicon(), cfg.lang_dim, cfg.encoder_seed),
            encoder: ObservationEncoder::with_input_scale(cfg.raw_dim, cfg.obs_embed_dim, cfg.encoder_seed, cfg.mixing_scale),
            schedule: Schedule::from_config(&cfg)?,
            limits: Limits::identity(cfg.obs_embed_dim),
            config: cfg,
            params,
            codebook,
            train_step: 0,
        })
    }

    pub fn is_flat(&self) -> bool {
        self.config.flat
    }

    pub fn optimizer_a_names(&self) -> Vec<&str> {
        self.params.names().filter(|n| in_optimizer_a(n)).collect()
    }

    pub fn optimizer_b_names(&self) -> Vec<&str> {
        self.params.names().filter(|n| in_optimizer_b(n)).collect()
    }

    /// Scalars in every trainable parameter plus the codebook entries.
    pub fn num_parameters(&self) -> usize {
        let codes = if self.is_flat() { 0 } else { self.codebook.codes().len() };
        self.params.num_scalars("") + codes
    }

    /// Builds the diffuser condition for `obs[B, obs_dim]`, `lang[B, lang_dim]`.
    pub fn condition(&self, tape: &mut Tape, obs: Var, lang: Var) -> Result<Conditioning> {
        if self.is_flat() {
            let cond = skill::flat_condition(tape, &self.params, obs, lang)?;
            return Ok(Conditioning { cond, skill: None });
        }
        let latent = skill::predict_skill(tape, &self.params, &self.config, obs, lang)?;
        let (idx, z) = self.codebook.straight_through(tape, latent)?;
        let cond = skill::skill_embed(tape, &self.params, z)?;
        Ok(Conditioning {
            cond,
            skill: Some((latent, idx)),
        })
    }

    /// Inference-time skill selection: chosen codes (if any) and `[B, cond]`.
    pub fn select(&self, obs: &Tensor, lang: &Tensor) -> Result<(Vec<Option<usize>>, Tensor)> {
        let mut tape = Tape::new();
        let o = tape.constant(obs.clone());
        let l = tape.constant(lang.clone());
        let c = self.condition(&mut tape, o, l)?;
        let idx = match c.skill {
            Some((_, idx)) => idx.into_iter().map(Some).collect(),
            None => vec![None; obs.dim(0)],
        };
        Ok((idx, tape.value(c.cond).clone()))
    }

    /// Skill codes predicted for each row, without building the condition.
    pub fn predict_codes(&self, obs: &Tensor, lang: &Tensor) -> Result<Vec<usize>> {
        if self.is_flat() {
            return Err(Error::Config("the flat variant has no skill codebook".into()));
        }
        let mut tape = Tape::new();
        let o = tape.constant(obs.clone());
        let l = tape.constant(lang.clone());
        let z = skill::predict_skill(&mut tape, &self.params, &self.config, o, l)?;
        Ok(self.codebook.quantize_rows(tape.value(z)).0)
    }

    pub fn records(&self) -> Vec<(String, Tensor)> {
        let mut out = self.params.state_records("");
        out.extend(self.codebook.records());
        out.extend(self.limits.records());
        out.push((TRAIN_STEP_KEY.into(), Tensor::scalar(self.train_step as f64)));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_tensor_file(path, &self.records())
    }

    /// Loads a checkpoint written by [`Planner::save`], checking every
    /// parameter against the shapes `config` implies.
    pub fn load(path: &Path, config: &PlannerConfig) -> Result<Planner> {
        let records = read_tensor_file(path)?;
        Self::from_records(records, config)
    }

    pub fn from_records(mut records: BTreeMap<String, Tensor>, config: &PlannerConfig) -> Result<Planner> {
        let mut planner = Planner::new(config, 0)?;
        let book: BTreeMap<String, Tensor> = records
            .keys()
            .filter(|k| k.starts_with("codebook.") || k.starts_with("limits."))
            .cloned()
            .collect::<Vec<_>>()
            .into_iter()
            .filter_map(|k| records.remove_entry(&k))
            .collect();
        let step = records.remove(TRAIN_STEP_KEY).map_or(0, |t| t.item() as u64);
        let params = ParamStore::from_records(&records, "")?;
        let want: Vec<(&str, &[usize])> = planner.params.names().map(|n| (n, planner.params.value(n).unwrap().shape())).collect();
        for (name, shape) in &want {
            let got = params
                .value(name)
                .map_err(|_| Error::Config(format!("checkpoint lacks parameter {name} required by the configuration")))?;
            if got.shape() != *shape {
                return Err(Error::Config(format!(
                    "checkpoint parameter {name} has shape {:?}, configuration expects {:?}",
                    got.shape(),
                    shape
                )));
            }
        }
        if let Some(extra) = params.names().find(|n| !planner.params.contains(n)) {
            return Err(Error::Config(format!("checkpoint parameter {extra} is unknown to the configuration")));
        }
        if !planner.is_flat() {
            let cb = Codebook::from_records(&book)?;
            if cb.codes().shape() != planner.codebook.codes().shape() {
                return Err(Error::Config(format!(
                    "checkpoint codebook {:?} does not match configured {:?}",
                    cb.codes().shape(),
                    planner.codebook.codes().shape()
                )));
            }
            planner.codebook = cb;
        }
        let limits = Limits::from_records(&book)?;
        if limits.dim() != planner.config.obs_embed_dim {
            return Err(Error::Config(format!(
                "checkpoint limits cover {} dimensions, configuration expects {}",
                limits.dim(),
                planner.config.obs_embed_dim
            )));
        }
        planner.limits = limits;
        planner.params = params;
        planner.train_step = step;
        Ok(planner)
    }
}
