//! Closed-loop execution: a skill and a plan every `H` steps, one action per
//! step from the inverse dynamics model.

use std::fmt::Write as _;

use crate::diffusion;
use crate::error::{Error, Result};
use crate::invdyn;
use crate::model::{Planner, TOY_FAMILY};
use crate::numerics::{Rng, Tensor};
use crate::toyworld::Env;

/// Skill and plan chosen at the start of a block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub skill: Option<usize>,
    /// `[plan_len, D]`; row 0 is the embedding the plan was anchored to.
    pub plan: Tensor,
}

/// A policy that plans in blocks. Row `i` of every slice belongs to episode `i`
/// and draws randomness only from `rngs[i]`.
pub trait Agent {
    fn plan(&self, raw: &[Vec<f64>], instructions: &[Vec<String>], rngs: &mut [Rng]) -> Result<Vec<Block>>;

    /// Actions for the step `offset` steps into each episode's block.
    fn act(&self, raw: &[Vec<f64>], blocks: &[Block], offset: usize, rngs: &mut [Rng]) -> Result<Vec<Vec<f64>>>;
}

/// The trained planner with guidance scale `omega`.
pub struct PlannerAgent<'a> {
    pub planner: &'a Planner,
    pub omega: f64,
}

impl<'a> PlannerAgent<'a> {
    pub fn new(planner: &'a Planner) -> Self {
        PlannerAgent {
            planner,
            omega: planner.config.guidance_scale,
        }
    }

    fn embed(&self, raw: &[Vec<f64>]) -> Result<Tensor> {
        let width = self.planner.config.raw_dim;
        let data: Vec<f64> = raw.iter().flatten().copied().collect();
        if data.len() != raw.len() * width {
            return Err(Error::Config(format!("observations are not {width} wide")));
        }
        self.planner.encoder.encode_rows(&Tensor::new(&[raw.len(), width], data)?)
    }
}

impl Agent for PlannerAgent<'_> {
    fn plan(&self, raw: &[Vec<f64>], instructions: &[Vec<String>], rngs: &mut [Rng]) -> Result<Vec<Block>> {
        let p = self.planner;
        let obs = self.embed(raw)?;
        let lang = instructions.iter().map(|t| p.vocab.encode(t)).collect::<Result<Vec<_>>>()?;
        let lang = Tensor::stack(&lang)?;
        let (skills, cond) = p.select(&obs, &lang)?;
        let starts = (0..obs.dim(0))
            .map(|i| p.limits.normalize(&Tensor::vector(obs.row(i))))
            .collect::<Result<Vec<_>>>()?;
        let plans = diffusion::sample_plans(&p.params, &p.config, &p.schedule, &starts, Some(&cond), self.omega, rngs)?;
        let mut blocks = Vec::with_capacity(plans.len());
        for (i, (skill, plan)) in skills.into_iter().zip(plans).enumerate() {
            let mut data = p.limits.denormalize(&plan)?.into_data();
            // the anchor row is the observation itself, not its round trip
            data[..obs.dim(1)].copy_from_slice(obs.row(i));
            blocks.push(Block {
                skill,
                plan: Tensor::new(plan.shape(), data)?,
            });
        }
        Ok(blocks)
    }

    fn act(&self, raw: &[Vec<f64>], blocks: &[Block], offset: usize, _rngs: &mut [Rng]) -> Result<Vec<Vec<f64>>> {
        let p = self.planner;
        let s = self.embed(raw)?;
        let next: Vec<Tensor> = blocks.iter().map(|b| Tensor::vector(b.plan.row(offset + 1))).collect();
        let raw_t = Tensor::new(&[raw.len(), p.config.raw_dim], raw.iter().flatten().copied().collect())?;
        let a = invdyn::infer_actions(&p.params, &p.config, TOY_FAMILY, &s, &Tensor::stack(&next)?, &raw_t)?;
        Ok((0..a.dim(0)).map(|i| a.row(i).to_vec()).collect())
    }
}

/// Uniform actions in `[-1, 1]^action_dim`.
pub struct RandomAgent {
    pub action_dim: usize,
}

impl Agent for RandomAgent {
    fn plan(&self, raw: &[Vec<f64>], _: &[Vec<String>], _: &mut [Rng]) -> Result<Vec<Block>> {
        Ok(raw
            .iter()
            .map(|_| Block {
                skill: None,
                plan: Tensor::zeros(&[0, 0]),
            })
            .collect())
    }

    fn act(&self, raw: &[Vec<f64>], _: &[Block], _: usize, rngs: &mut [Rng]) -> Result<Vec<Vec<f64>>> {
        Ok(raw
            .iter()
            .zip(rngs.iter_mut())
            .map(|(_, r)| (0..self.action_dim).map(|_| r.uniform_range(-1.0, 1.0)).collect())
            .collect())
    }
}

/// Everything observed and done in one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub success: bool,
    /// Raw observations, `steps + 1` of them unless the episode faulted.
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    /// Skill in force at each step.
    pub skills: Vec<Option<usize>>,
    /// Set when the environment rejected an action.
    pub fault: Option<String>,
}

impl EpisodeResult {
    pub fn steps(&self) -> usize {
        self.actions.len()
    }

    /// `success=<0|1> steps=<n> skills=<k,k,...> [fault=<msg>]`, with `-` for
    /// steps without a skill code.
    pub fn record(&self) -> String {
        let skills: Vec<String> = self
            .skills
            .iter()
            .map(|s| s.map_or_else(|| "-".to_string(), |k| k.to_string()))
            .collect();
        let mut out = format!("success={} steps={} skills={}", self.success as u8, self.steps(), skills.join(","));
        if let Some(f) = &self.fault {
            let _ = write!(out, " fault={}", f.replace(char::is_whitespace, "_"));
        }
        out
    }
}

/// Runs every episode in lockstep for `steps` steps, replanning every
/// `horizon` steps. Agent randomness for episode `i` comes from `rngs[i]`.
pub fn rollout_batch<E: Env>(
    agent: &dyn Agent,
    envs: &mut [E],
    instructions: &[Vec<String>],
    steps: usize,
    horizon: usize,
    rngs: &mut [Rng],
) -> Result<Vec<EpisodeResult>> {
    let n = envs.len();
    if instructions.len() != n || rngs.len() != n {
        return Err(Error::Contract("one instruction and one rng per episode required".into()));
    }
    if horizon == 0 {
        return Err(Error::Config("horizon must be positive".into()));
    }
    let mut results: Vec<EpisodeResult> = envs
        .iter_mut()
        .map(|e| EpisodeResult {
            success: e.succeeded(),
            observations: vec![e.observe()],
            actions: Vec::new(),
            skills: Vec::new(),
            fault: None,
        })
        .collect();
    let mut t0 = 0;
    while t0 < steps {
        let live: Vec<usize> = (0..n).filter(|&i| results[i].fault.is_none()).collect();
        if live.is_empty() {
            break;
        }
        let current = |results: &[EpisodeResult]| -> Vec<Vec<f64>> {
            live.iter().map(|&i| results[i].observations.last().unwrap().clone()).collect()
        };
        let instr: Vec<Vec<String>> = live.iter().map(|&i| instructions[i].clone()).collect();
        let mut live_rngs: Vec<Rng> = live.iter().map(|&i| rngs[i].clone()).collect();
        let blocks = agent.plan(&current(&results), &instr, &mut live_rngs)?;
        for offset in 0..horizon.min(steps - t0) {
            let acts = agent.act(&current(&results), &blocks, offset, &mut live_rngs)?;
            for (j, &i) in live.iter().enumerate() {
                let r = &mut results[i];
                if r.fault.is_some() {
                    continue;
                }
                match envs[i].step(&acts[j]) {
                    Ok(()) => {
                        r.observations.push(envs[i].observe());
                        r.actions.push(acts[j].clone());
                        r.skills.push(blocks[j].skill);
                        r.success |= envs[i].succeeded();
                    }
                    Err(e) => {
                        r.fault = Some(e.to_string());
                        r.success = false;
                    }
                }
            }
        }
        for (j, &i) in live.iter().enumerate() {
            rngs[i] = live_rngs[j].clone();
        }
        t0 += horizon;
    }
    Ok(results)
}

/// A single episode of `steps` steps.
pub fn rollout_episode<E: Env>(
    agent: &dyn Agent,
    env: &mut E,
    instruction: &[String],
    steps: usize,
    horizon: usize,
    rng: &mut Rng,
) -> Result<EpisodeResult> {
    let mut rngs = [rng.clone()];
    let out = rollout_batch(agent, std::slice::from_mut(env), &[instruction.to_vec()], steps, horizon, &mut rngs)?;
    *rng = rngs[0].clone();
    Ok(out.into_iter().next().expect("one episode"))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Counter {
        steps: usize,
        fail_at: Option<usize>,
    }

    impl Env for Counter {
        fn observe(&mut self) -> Vec<f64> {
            vec![self.steps as f64]
        }
        fn step(&mut self, _: &[f64]) -> Result<()> {
            if Some(self.steps) == self.fail_at {
                return Err(Error::Contract("stuck".into()));
            }
            self.steps += 1;
            Ok(())
        }
        fn succeeded(&self) -> bool {
            self.steps >= 3
        }
    }

    struct StepAgent;

    impl Agent for StepAgent {
        fn plan(&self, raw: &[Vec<f64>], _: &[Vec<String>], _: &mut [Rng]) -> Result<Vec<Block>> {
            Ok(raw
                .iter()
                .map(|r| Block {
                    skill: Some(r[0] as usize),
                    plan: Tensor::zeros(&[1, 1]),
                })
                .collect())
        }
        fn act(&self, raw: &[Vec<f64>], _: &[Block], _: usize, _: &mut [Rng]) -> Result<Vec<Vec<f64>>> {
            Ok(raw.iter().map(|_| vec![0.0]).collect())
        }
    }

    #[test]
    fn skills_switch_at_block_starts() {
        let mut env = Counter { steps: 0, fail_at: None };
        let r = rollout_episode(&StepAgent, &mut env, &["x".into()], 20, 8, &mut Rng::new(0)).unwrap();
        assert_eq!(r.steps(), 20);
        let want: Vec<Option<usize>> = (0..20).map(|t| Some(t / 8 * 8)).collect();
        assert_eq!(r.skills, want);
        assert!(r.success);
    }

    #[test]
    fn env_fault_fails_episode() {
        let mut envs = [Counter { steps: 0, fail_at: Some(4) }, Counter { steps: 0, fail_at: None }];
        let instr = vec![vec!["x".to_string()]; 2];
        let mut rngs = [Rng::new(0), Rng::new(1)];
        let r = rollout_batch(&StepAgent, &mut envs, &instr, 10, 4, &mut rngs).unwrap();
        assert!(!r[0].success && r[0].fault.is_some() && r[0].steps() == 4);
        assert!(r[1].success && r[1].steps() == 10);
        assert!(r[0].record().starts_with("success=0 steps=4 skills=0,0,0,0 fault="));
    }

    #[test]
    fn random_actions_stay_in_box() {
        let agent = RandomAgent { action_dim: 4 };
        let mut rngs = [Rng::new(5)];
        let a = agent.act(&[vec![0.0]], &[], 0, &mut rngs).unwrap();
        assert!(a[0].iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
