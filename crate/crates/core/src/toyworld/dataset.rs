use std::path::Path;

use super::{Env, Family, Mixing, Task, ToyEnv, ACTION_DIM};
use crate::error::{ensure, Error, Result};
use crate::numerics::{ByteReader, Rng, Tensor};

pub const DATASET_MAGIC: &[u8; 4] = b"SKDD";
pub const DATASET_VERSION: u32 = 1;

/// One demonstration: instruction tokens, `T + 1` raw observations and `T`
/// actions. No rewards and no sub-task boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub task: Task,
    pub tokens: Vec<String>,
    pub observations: Tensor,
    pub actions: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub episode_len: usize,
    pub raw_dim: usize,
    pub action_dim: usize,
    pub trajectories: Vec<Trajectory>,
}

/// Bookkeeping from generation that the file itself does not carry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSummary {
    pub per_task: Vec<(Task, usize, usize)>,
}

impl DatasetSummary {
    pub fn success_rate(&self) -> f64 {
        let (n, s) = self.per_task.iter().fold((0, 0), |(n, s), t| (n + t.1, s + t.2));
        s as f64 / n.max(1) as f64
    }
}

/// Scripted-expert demonstrations balanced over tasks (task `i mod 6`),
/// seen-family instructions only. Trajectory `i` draws from `rng.fork(i)`.
pub fn generate_dataset(
    num: usize,
    episode_len: usize,
    expert_noise: f64,
    mixing: &Mixing,
    obs_noise: f64,
    rng: &Rng,
) -> (Dataset, DatasetSummary) {
    let mut trajectories = Vec::with_capacity(num);
    let mut per_task: Vec<(Task, usize, usize)> = Task::ALL.iter().map(|&t| (t, 0, 0)).collect();
    for i in 0..num {
        let task = Task::ALL[i % Task::ALL.len()];
        let mut r = rng.fork(i as u64);
        let tokens = super::sample_instruction(task, Family::Seen, &mut r);
        let mut env = ToyEnv::new(task, mixing.clone(), obs_noise, &mut r);
        let mut act_rng = r.fork_named("expert-noise");
        let mut obs = Vec::with_capacity((episode_len + 1) * mixing.raw_dim());
        let mut acts = Vec::with_capacity(episode_len * ACTION_DIM);
        obs.extend(env.observe());
        for _ in 0..episode_len {
            let a = env.expert_action(&mut act_rng, expert_noise);
            env.step(&a).expect("expert actions are finite");
            acts.extend_from_slice(&a);
            obs.extend(env.observe());
        }
        let slot = &mut per_task[task.id() as usize];
        slot.1 += 1;
        slot.2 += env.succeeded() as usize;
        trajectories.push(Trajectory {
            task,
            tokens,
            observations: Tensor::new(&[episode_len + 1, mixing.raw_dim()], obs).expect("sized above"),
            actions: Tensor::new(&[episode_len, ACTION_DIM], acts).expect("sized above"),
        });
    }
    (
        Dataset {
            episode_len,
            raw_dim: mixing.raw_dim(),
            action_dim: ACTION_DIM,
            trajectories,
        },
        DatasetSummary { per_task },
    )
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

/// Header `SKDD`, version, trajectory count, episode length, raw width and
/// action width (all `u32`), then per trajectory: token count, each token as
/// length + UTF-8 bytes, the observation block, the action block (`f64`) and
/// the task id byte. Little-endian throughout.
pub fn encode_dataset(d: &Dataset) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    for v in [d.trajectories.len(), d.episode_len, d.raw_dim, d.action_dim] {
        put_u32(&mut buf, v);
    }
    for t in &d.trajectories {
        put_u32(&mut buf, t.tokens.len());
        for tok in &t.tokens {
            put_u32(&mut buf, tok.len());
            buf.extend_from_slice(tok.as_bytes());
        }
        for v in t.observations.data().iter().chain(t.actions.data()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.push(t.task.id());
    }
    buf
}

pub fn decode_dataset(buf: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(buf);
    ensure!(r.bytes(4)? == DATASET_MAGIC, Format, "not a dataset file (bad magic)");
    let version = r.u32()?;
    ensure!(version == DATASET_VERSION, Format, "unsupported dataset version {version}");
    let n = r.u32()? as usize;
    let episode_len = r.u32()? as usize;
    let raw_dim = r.u32()? as usize;
    let action_dim = r.u32()? as usize;
    let mut trajectories = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let ntok = r.u32()? as usize;
        let mut tokens = Vec::with_capacity(ntok.min(256));
        for _ in 0..ntok {
            let len = r.u32()? as usize;
            let s = std::str::from_utf8(r.bytes(len)?).map_err(|e| Error::Format(format!("token is not UTF-8: {e}")))?;
            tokens.push(s.to_string());
        }
        let obs = r.f64s((episode_len + 1) * raw_dim)?;
        let acts = r.f64s(episode_len * action_dim)?;
        let task = Task::from_id(r.u8()?)?;
        trajectories.push(Trajectory {
            task,
            tokens,
            observations: Tensor::new(&[episode_len + 1, raw_dim], obs)?,
            actions: Tensor::new(&[episode_len, action_dim], acts)?,
        });
    }
    ensure!(r.at_end(), Format, "trailing bytes after {n} trajectories");
    Ok(Dataset {
        episode_len,
        raw_dim,
        action_dim,
        trajectories,
    })
}

pub fn write_dataset(path: &Path, d: &Dataset) -> Result<()> {
    std::fs::write(path, encode_dataset(d)).map_err(|e| Error::io(path.display(), e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path.display(), e))?;
    decode_dataset(&buf)
}
