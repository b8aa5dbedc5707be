//! Planar multi-task world with a drawer, a faucet and two mugs, scripted
//! pseudo-experts, instruction rephrasals and the demonstration dataset.
//!
//! Agents only ever see [`Env::observe`]; the [`WorldState`] stays inside
//! [`ToyEnv`] and the success predicates.

mod dataset;
mod language;

pub use dataset::{generate_dataset, read_dataset, write_dataset, Dataset, DatasetSummary, Trajectory};
pub use language::{lexicon, sample_instruction, surface_forms, Family};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::PlannerConfig;

pub const STATE_DIM: usize = 8;
pub const ACTION_DIM: usize = 4;
pub const DRAWER_HANDLE: [f64; 2] = [-0.9, 0.9];
pub const FAUCET: [f64; 2] = [0.8, 0.8];
pub const ACTUATE_RADIUS: f64 = 0.15;
pub const MUG_RADIUS: f64 = 0.1;
pub const STEP_SCALE: f64 = 0.1;
pub const FAUCET_GOAL: f64 = 0.9;
pub const MUG_GOAL: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Task {
    CloseDrawer,
    OpenDrawer,
    FaucetLeft,
    FaucetRight,
    BlackMugRight,
    WhiteMugDown,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::CloseDrawer,
        Task::OpenDrawer,
        Task::FaucetLeft,
        Task::FaucetRight,
        Task::BlackMugRight,
        Task::WhiteMugDown,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Result<Task> {
        Task::ALL
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown task id {id}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::CloseDrawer => "close_drawer",
            Task::OpenDrawer => "open_drawer",
            Task::FaucetLeft => "turn_faucet_left",
            Task::FaucetRight => "turn_faucet_right",
            Task::BlackMugRight => "move_black_mug_right",
            Task::WhiteMugDown => "move_white_mug_down",
        }
    }

    /// Whether `now` satisfies the task relative to the episode start.
    pub fn is_success(self, start: &WorldState, now: &WorldState) -> bool {
        match self {
            Task::CloseDrawer => now.drawer < 0.1,
            Task::OpenDrawer => now.drawer > 0.9,
            Task::FaucetLeft => now.faucet < -FAUCET_GOAL,
            Task::FaucetRight => now.faucet > FAUCET_GOAL,
            Task::BlackMugRight => now.black[0] - start.black[0] >= MUG_GOAL - 1e-9,
            Task::WhiteMugDown => now.white[1] - start.white[1] <= -MUG_GOAL + 1e-9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldState {
    pub gripper: [f64; 2],
    /// 0 is closed, 1 fully open.
    pub drawer: f64,
    /// Negative is left.
    pub faucet: f64,
    pub black: [f64; 2],
    pub white: [f64; 2],
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn clip2(p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(-1.0, 1.0), p[1].clamp(-1.0, 1.0)]
}

impl WorldState {
    pub fn to_array(&self) -> [f64; STATE_DIM] {
        [
            self.gripper[0],
            self.gripper[1],
            self.drawer,
            self.faucet,
            self.black[0],
            self.black[1],
            self.white[0],
            self.white[1],
        ]
    }

    /// Randomised start in which `task` is not yet solved. Degrees of freedom
    /// share one distribution across tasks wherever that keeps the task open,
    /// so the start alone says little about the instruction.
    pub fn reset(task: Task, rng: &mut Rng) -> WorldState {
        let gripper = [rng.uniform_range(-0.1, 0.1), rng.uniform_range(-0.1, 0.1)];
        let closed = (0.0, 0.15);
        let open = (0.85, 1.0);
        let drawer = match task {
            Task::CloseDrawer => rng.uniform_range(open.0, open.1),
            Task::OpenDrawer => rng.uniform_range(closed.0, closed.1),
            _ => {
                let (lo, hi) = if rng.bernoulli(0.5) { open } else { closed };
                rng.uniform_range(lo, hi)
            }
        };
        let faucet = rng.uniform_range(-0.2, 0.2);
        let black = [rng.uniform_range(-0.9, -0.7), rng.uniform_range(-0.9, -0.7)];
        let white = [rng.uniform_range(0.7, 0.9), rng.uniform_range(0.1, 0.3)];
        WorldState {
            gripper,
            drawer,
            faucet,
            black,
            white,
        }
    }

    /// Deterministic transition. Contact gates use the pre-step gripper.
    pub fn step(&self, action: &[f64]) -> Result<WorldState> {
        if action.len() != ACTION_DIM || action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Contract(format!("action must be {ACTION_DIM} finite values, got {action:?}")));
        }
        let a: Vec<f64> = action.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        let mv = [STEP_SCALE * a[0], STEP_SCALE * a[1]];
        let mut next = *self;
        next.gripper = clip2([self.gripper[0] + mv[0], self.gripper[1] + mv[1]]);
        if dist(self.gripper, DRAWER_HANDLE) < ACTUATE_RADIUS {
            next.drawer = (self.drawer + STEP_SCALE * a[2]).clamp(0.0, 1.0);
        }
        if dist(self.gripper, FAUCET) < ACTUATE_RADIUS {
            next.faucet = (self.faucet + STEP_SCALE * a[3]).clamp(-1.0, 1.0);
        }
        if dist(self.gripper, self.black) < MUG_RADIUS {
            next.black = clip2([self.black[0] + mv[0], self.black[1] + mv[1]]);
        }
        if dist(self.gripper, self.white) < MUG_RADIUS {
            next.white = clip2([self.white[0] + mv[0], self.white[1] + mv[1]]);
        }
        Ok(next)
    }
}

/// Proportional reach-then-actuate controller plus `N(0, noise^2)` action
/// noise, clipped to the action box.
pub fn scripted_expert(task: Task, state: &WorldState, rng: &mut Rng, noise: f64) -> [f64; ACTION_DIM] {
    let toward = |p: [f64; 2]| {
        [
            ((p[0] - state.gripper[0]) / STEP_SCALE).clamp(-1.0, 1.0),
            ((p[1] - state.gripper[1]) / STEP_SCALE).clamp(-1.0, 1.0),
        ]
    };
    let mut a = [0.0; ACTION_DIM];
    match task {
        Task::CloseDrawer | Task::OpenDrawer => {
            let m = toward(DRAWER_HANDLE);
            a[..2].copy_from_slice(&m);
            if dist(state.gripper, DRAWER_HANDLE) < ACTUATE_RADIUS {
                a[2] = if task == Task::CloseDrawer { -1.0 } else { 1.0 };
            }
        }
        Task::FaucetLeft | Task::FaucetRight => {
            let m = toward(FAUCET);
            a[..2].copy_from_slice(&m);
            if dist(state.gripper, FAUCET) < ACTUATE_RADIUS {
                a[3] = if task == Task::FaucetLeft { -1.0 } else { 1.0 };
            }
        }
        Task::BlackMugRight | Task::WhiteMugDown => {
            let (mug, push) = if task == Task::BlackMugRight {
                (state.black, [1.0, 0.0])
            } else {
                (state.white, [0.0, -1.0])
            };
            let m = if dist(state.gripper, mug) < MUG_RADIUS { push } else { toward(mug) };
            a[..2].copy_from_slice(&m);
        }
    }
    if noise > 0.0 {
        for v in a.iter_mut() {
            *v += noise * rng.normal();
        }
    }
    a.map(|v| v.clamp(-1.0, 1.0))
}

/// Fixed linear map from the 8 state scalars to the raw observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixing {
    matrix: Tensor,
}

impl Mixing {
    pub fn new(raw_dim: usize, seed: u64) -> Self {
        Self::scaled(raw_dim, seed, 1.0)
    }

    /// Entries `N(0, scale^2)`; the draws do not depend on `scale`.
    pub fn scaled(raw_dim: usize, seed: u64, scale: f64) -> Self {
        let mut rng = Rng::new(seed).fork_named("state-mixing");
        Mixing {
            matrix: rng.normal_tensor(&[raw_dim, STATE_DIM], scale),
        }
    }

    pub fn from_config(cfg: &PlannerConfig) -> Self {
        Self::scaled(cfg.raw_dim, cfg.world_seed, cfg.mixing_scale)
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn raw_dim(&self) -> usize {
        self.matrix.dim(0)
    }

    /// `M s`, without noise.
    pub fn apply(&self, state: &WorldState) -> Vec<f64> {
        let s = state.to_array();
        (0..self.raw_dim())
            .map(|i| self.matrix.row(i).iter().zip(&s).map(|(m, v)| m * v).sum())
            .collect()
    }
}

/// What an agent can do with an environment.
pub trait Env {
    /// Raw observation of the current state.
    fn observe(&mut self) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<()>;
    /// True once the task predicate has held at any step so far.
    fn succeeded(&self) -> bool;
}

/// One episode of one task in the toy world.
#[derive(Clone, Debug)]
pub struct ToyEnv {
    task: Task,
    start: WorldState,
    state: WorldState,
    mixing: Mixing,
    obs_noise: f64,
    rng: Rng,
    success: bool,
}

impl ToyEnv {
    /// Resets with `rng`; observation noise draws from a child stream.
    pub fn new(task: Task, mixing: Mixing, obs_noise: f64, rng: &mut Rng) -> ToyEnv {
        let start = WorldState::reset(task, rng);
        ToyEnv {
            task,
            start,
            state: start,
            mixing,
            obs_noise,
            rng: rng.fork_named("observation-noise"),
            success: task.is_success(&start, &start),
        }
    }

    pub fn task(&self) -> Task {
        self.task
    }

    /// Action of the scripted expert from the hidden state.
    pub(crate) fn expert_action(&self, rng: &mut Rng, noise: f64) -> [f64; ACTION_DIM] {
        scripted_expert(self.task, &self.state, rng, noise)
    }
}

impl Env for ToyEnv {
    fn observe(&mut self) -> Vec<f64> {
        let mut raw = self.mixing.apply(&self.state);
        if self.obs_noise > 0.0 {
            for v in raw.iter_mut() {
                *v += self.obs_noise * self.rng.normal();
            }
        }
        raw
    }

    fn step(&mut self, action: &[f64]) -> Result<()> {
        self.state = self.state.step(action)?;
        self.success |= self.task.is_success(&self.start, &self.state);
        Ok(())
    }

    fn succeeded(&self) -> bool {
        self.success
    }
}

/// Runs the scripted expert for `steps` steps and reports success.
pub fn expert_episode(task: Task, noise: f64, steps: usize, rng: &mut Rng) -> bool {
    let mut s = WorldState::reset(task, rng);
    let start = s;
    let mut act_rng = rng.fork_named("expert-noise");
    for _ in 0..steps {
        if task.is_success(&start, &s) {
            return true;
        }
        s = s.step(&scripted_expert(task, &s, &mut act_rng, noise)).expect("expert actions are finite");
    }
    task.is_success(&start, &s)
}
