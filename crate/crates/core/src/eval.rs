//! Success-rate tables and the skill/word frequency heatmap.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::config::PlannerConfig;
use crate::error::{Error, Result};
use crate::model::Planner;
use crate::numerics::{Rng, Tensor};
use crate::rollout::{rollout_batch, Agent, EpisodeResult};
use crate::toyworld::{sample_instruction, Dataset, Family, Mixing, Task, ToyEnv};

pub const EVAL_HEADER: &str = "task,family,seed,episodes,successes,success_rate";

/// Successes of one (task, family, seed) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub task: Task,
    pub family: Family,
    pub seed: u64,
    pub episodes: usize,
    pub successes: usize,
}

impl Cell {
    pub fn success_rate(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.successes as f64 / self.episodes as f64
        }
    }
}

/// One finished episode with its coordinates.
#[derive(Clone, Debug)]
pub struct Episode {
    pub task: Task,
    pub family: Family,
    pub seed: u64,
    pub index: usize,
    pub instruction: Vec<String>,
    pub result: EpisodeResult,
}

/// Runs `episodes` episodes per task × family for every seed.
///
/// Initial states depend on (seed, task, episode) only, so every family and
/// every agent faces the same start states.
pub fn evaluate(
    agent: &dyn Agent,
    cfg: &PlannerConfig,
    families: &[Family],
    seeds: &[u64],
    episodes: usize,
) -> Result<(Vec<Cell>, Vec<Episode>)> {
    let mixing = Mixing::from_config(cfg);
    let mut cells = Vec::new();
    let mut log = Vec::new();
    for &seed in seeds {
        let root = Rng::new(seed).fork_named("eval");
        let mut envs = Vec::new();
        let mut instructions = Vec::new();
        let mut rngs = Vec::new();
        let mut coords = Vec::new();
        for task in Task::ALL {
            for (fi, &family) in families.iter().enumerate() {
                for e in 0..episodes {
                    let ep = root.fork(task.id() as u64).fork(e as u64);
                    envs.push(ToyEnv::new(task, mixing.clone(), cfg.obs_noise, &mut ep.fork_named("env")));
                    let mut ir = ep.fork_named("instruction").fork(fi as u64);
                    instructions.push(sample_instruction(task, family, &mut ir));
                    rngs.push(ep.fork_named("agent").fork(fi as u64));
                    coords.push((task, family, e));
                }
            }
        }
        let results = if envs.is_empty() {
            Vec::new()
        } else {
            rollout_batch(agent, &mut envs, &instructions, cfg.episode_len, cfg.horizon, &mut rngs)?
        };
        for task in Task::ALL {
            for &family in families {
                cells.push(Cell {
                    task,
                    family,
                    seed,
                    episodes,
                    successes: 0,
                });
            }
        }
        let base = cells.len() - Task::ALL.len() * families.len();
        for (((task, family, index), result), instruction) in coords.into_iter().zip(results).zip(instructions) {
            let fi = families.iter().position(|&f| f == family).expect("listed family");
            let cell = &mut cells[base + task.id() as usize * families.len() + fi];
            cell.successes += result.success as usize;
            log.push(Episode {
                task,
                family,
                seed,
                index,
                instruction,
                result,
            });
        }
    }
    cells.sort_by_key(|c| (c.task, c.family, c.seed));
    Ok((cells, log))
}

/// Mean success rate over the cells accepted by `keep`.
pub fn mean_rate(cells: &[Cell], keep: impl Fn(&Cell) -> bool) -> f64 {
    let (n, s) = cells
        .iter()
        .filter(|c| keep(c))
        .fold((0, 0), |(n, s), c| (n + c.episodes, s + c.successes));
    if n == 0 {
        0.0
    } else {
        s as f64 / n as f64
    }
}

fn csv_row(out: &mut String, task: &str, family: &str, seed: &str, episodes: usize, successes: usize) {
    let rate = if episodes == 0 { 0.0 } else { successes as f64 / episodes as f64 };
    let _ = writeln!(out, "{task},{family},{seed},{episodes},{successes},{rate:.6}");
}

/// Per-cell rows, then `all` rows per (family, seed) and per family. With no
/// episodes the body is empty.
pub fn eval_csv(cells: &[Cell]) -> String {
    let mut out = format!("{EVAL_HEADER}\n");
    if cells.iter().all(|c| c.episodes == 0) {
        return out;
    }
    for c in cells {
        csv_row(&mut out, c.task.name(), c.family.name(), &c.seed.to_string(), c.episodes, c.successes);
    }
    let mut by_family: BTreeMap<Family, BTreeMap<u64, (usize, usize)>> = BTreeMap::new();
    for c in cells {
        let e = by_family.entry(c.family).or_default().entry(c.seed).or_default();
        e.0 += c.episodes;
        e.1 += c.successes;
    }
    for (family, seeds) in &by_family {
        for (seed, (n, s)) in seeds {
            csv_row(&mut out, "all", family.name(), &seed.to_string(), *n, *s);
        }
    }
    for (family, seeds) in &by_family {
        let (n, s) = seeds.values().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        csv_row(&mut out, "all", family.name(), "all", n, s);
    }
    out
}

/// One line per episode: coordinates, instruction and the rollout record.
pub fn episodes_log(episodes: &[Episode]) -> String {
    let mut out = String::new();
    for e in episodes {
        let _ = writeln!(
            out,
            "task={} family={} seed={} episode={} instruction={} {}",
            e.task.name(),
            e.family.name(),
            e.seed,
            e.index,
            e.instruction.join("_"),
            e.result.record()
        );
    }
    out
}

/// Word counts per skill code.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub words: Vec<String>,
    /// `counts[w][k]`
    pub counts: Vec<Vec<f64>>,
    pub skills: usize,
}

impl Heatmap {
    /// Column-normalised frequencies; empty columns stay zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        let mut totals = vec![0.0; self.skills];
        for row in &self.counts {
            for (t, v) in totals.iter_mut().zip(row) {
                *t += v;
            }
        }
        self.counts
            .iter()
            .map(|row| row.iter().zip(&totals).map(|(v, t)| if *t > 0.0 { v / t } else { 0.0 }).collect())
            .collect()
    }

    /// Up to `n` words of column `k` by normalised frequency, ties broken
    /// alphabetically; zero-frequency words are omitted.
    pub fn top_words(&self, k: usize, n: usize) -> Vec<(String, f64)> {
        let norm = self.normalized();
        let mut col: Vec<(String, f64)> = self
            .words
            .iter()
            .zip(&norm)
            .filter(|(_, r)| r[k] > 0.0)
            .map(|(w, r)| (w.clone(), r[k]))
            .collect();
        col.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        col.truncate(n);
        col
    }

    /// Columns whose most frequent word exceeds `threshold`.
    pub fn dominant_columns(&self, threshold: f64) -> usize {
        (0..self.skills)
            .filter(|&k| self.top_words(k, 1).first().is_some_and(|(_, f)| *f > threshold))
            .count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("word");
        for k in 0..self.skills {
            let _ = write!(out, ",skill_{k}");
        }
        out.push('\n');
        for (w, row) in self.words.iter().zip(self.normalized()) {
            out.push_str(w);
            for v in row {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        out
    }

    /// `skill_<k>: word (freq) ...` for every code.
    pub fn ranked_text(&self, n: usize) -> String {
        let mut out = String::new();
        for k in 0..self.skills {
            let _ = write!(out, "skill_{k}:");
            for (w, f) in self.top_words(k, n) {
                let _ = write!(out, " {w} ({f:.3})");
            }
            out.push('\n');
        }
        out
    }
}

/// Counts instruction words against the code the predictor selects at each
/// block start of every trajectory in `data`.
pub fn skill_heatmap(planner: &Planner, data: &Dataset) -> Result<Heatmap> {
    if planner.is_flat() {
        return Err(Error::Config("the flat variant has no skill codebook".into()));
    }
    let cfg = &planner.config;
    let mut obs = Vec::new();
    let mut lang = Vec::new();
    let mut tokens = Vec::new();
    for t in &data.trajectories {
        let states = planner.encoder.encode_rows(&t.observations)?;
        let l = planner.vocab.encode(&t.tokens)?;
        for k in 0..cfg.blocks(t.actions.dim(0)) {
            let t0 = k * cfg.horizon;
            obs.push(Tensor::vector(states.row(t0)));
            lang.push(l.clone());
            tokens.push(&t.tokens);
        }
    }
    let mut words: Vec<String> = tokens.iter().flat_map(|t| t.iter().cloned()).collect();
    words.sort();
    words.dedup();
    let mut counts = vec![vec![0.0; planner.codebook.len()]; words.len()];
    if !obs.is_empty() {
        let codes = planner.predict_codes(&Tensor::stack(&obs)?, &Tensor::stack(&lang)?)?;
        for (toks, k) in tokens.iter().zip(codes) {
            for w in toks.iter() {
                let i = words.binary_search(w).expect("collected above");
                counts[i][k] += 1.0;
            }
        }
    }
    Ok(Heatmap {
        words,
        counts,
        skills: planner.codebook.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::RandomAgent;

    fn map() -> Heatmap {
        Heatmap {
            words: vec!["close".into(), "drawer".into(), "open".into()],
            counts: vec![vec![3.0, 0.0, 0.0], vec![1.0, 0.0, 2.0], vec![0.0, 0.0, 2.0]],
            skills: 3,
        }
    }

    #[test]
    fn columns_normalise() {
        let n = map().normalized();
        assert!((n[0][0] + n[1][0] + n[2][0] - 1.0).abs() < 1e-12);
        assert!(n.iter().all(|r| r[1] == 0.0));
        assert_eq!(map().top_words(2, 5), vec![("drawer".into(), 0.5), ("open".into(), 0.5)]);
        assert_eq!(map().dominant_columns(0.5), 1);
    }

    #[test]
    fn zero_episodes_is_header_only() {
        let cfg = PlannerConfig::default();
        let (cells, _) = evaluate(&RandomAgent { action_dim: 4 }, &cfg, &[Family::Seen], &[1], 0).unwrap();
        assert_eq!(eval_csv(&cells), format!("{EVAL_HEADER}\n"));
    }

    #[test]
    fn random_rates_are_ratios() {
        let cfg = PlannerConfig::default();
        let (cells, log) = evaluate(&RandomAgent { action_dim: 4 }, &cfg, &[Family::Seen, Family::Human], &[1], 2).unwrap();
        assert_eq!(cells.len(), 12);
        assert_eq!(log.len(), 24);
        assert!(cells.iter().all(|c| (0.0..=1.0).contains(&c.success_rate())));
        assert!(log.iter().all(|e| e.result.steps() == cfg.episode_len));
    }
}
