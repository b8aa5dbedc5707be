//! Flat `key = value` configuration with `#` comments.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

macro_rules! config_struct {
    ($( $(#[$doc:meta])* $field:ident : $ty:ty = $default:expr ),* $(,)?) => {
        /// Every tunable of the planner, trainer, world and evaluator.
        #[derive(Clone, Debug, PartialEq)]
        pub struct PlannerConfig {
            $( $(#[$doc])* pub $field: $ty, )*
        }

        impl Default for PlannerConfig {
            fn default() -> Self {
                PlannerConfig { $( $field: $default, )* }
            }
        }

        impl PlannerConfig {
            fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($field) => {
                        self.$field = <$ty as ConfigValue>::parse(value)
                            .ok_or_else(|| Error::Config(format!("bad value {value:?} for {key}")))?;
                    } )*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            /// Renders every field in declaration order.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $( let _ = writeln!(out, "{} = {}", stringify!($field), self.$field.render()); )*
                out
            }
        }
    };
}

trait ConfigValue: Sized {
    fn parse(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

impl ConfigValue for usize {
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for f64 {
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for bool {
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for Vec<u64> {
    fn parse(s: &str) -> Option<Self> {
        s.split(',').map(|p| p.trim().parse().ok()).collect()
    }
    fn render(&self) -> String {
        self.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
    }
}

config_struct! {
    // encoders
    raw_dim: usize = 16,
    obs_embed_dim: usize = 32,
    lang_dim: usize = 32,
    /// Seed of the frozen encoder tables.
    encoder_seed: u64 = 7,

    // skill abstraction
    skill_set_size: usize = 20,
    code_dim: usize = 16,
    skill_embed_dim: usize = 128,
    skill_heads: usize = 4,
    skill_ff_dim: usize = 256,
    lambda_hidden: usize = 64,
    ema_decay: f64 = 0.99,
    staleness_threshold: u64 = 100,

    // diffusion
    cond_dim: usize = 64,
    diffusion_steps: usize = 50,
    beta_start: f64 = 1e-4,
    beta_end: f64 = 0.2,
    plan_len: usize = 16,
    unet_channels: usize = 32,
    unet_mid_channels: usize = 64,
    conv_width: usize = 5,
    norm_groups: usize = 8,
    time_embed_dim: usize = 32,
    guidance_scale: f64 = 1.2,
    cond_dropout: f64 = 0.25,
    /// Clamp of the predicted clean trajectory during sampling.
    sample_clip: f64 = 1.0,

    // inverse dynamics
    action_dim: usize = 4,
    invdyn_hidden: usize = 128,

    // training
    horizon: usize = 8,
    loss_weight: f64 = 0.01,
    lr_skill: f64 = 1e-5,
    lr_diffuser: f64 = 1e-3,
    lr_invdyn: f64 = 1e-3,
    batch_size: usize = 64,
    train_steps: usize = 8000,
    skill_update_period: usize = 10,
    checkpoint_every: usize = 1000,
    /// Language-conditioned ablation without the codebook.
    flat: bool = false,
    /// Hidden width of the ablation's conditioning map; 0 picks the width
    /// that matches the skill pathway's parameter count.
    flat_hidden: usize = 0,

    // world and data
    /// Seed of the world's state-to-observation mixing matrix.
    world_seed: u64 = 11,
    /// Standard deviation of the mixing entries. The encoder divides it out,
    /// so it sets how large the fixed observation noise is relative to the
    /// state signal.
    mixing_scale: f64 = 4.0,
    episode_len: usize = 20,
    num_trajectories: usize = 600,
    expert_noise: f64 = 0.3,
    obs_noise: f64 = 0.1,

    // evaluation
    episodes_per_cell: usize = 10,
    eval_seeds: Vec<u64> = vec![1, 2, 3],
}

impl PlannerConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PlannerConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display(), e))?;
        Self::parse(&text)
    }

    /// Applies a single override, then revalidates.
    pub fn with(mut self, key: &str, value: &str) -> Result<Self> {
        self.set(key, value)?;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.plan_len == 0 || !self.plan_len.is_multiple_of(4) {
            return fail(format!("plan_len {} must be a positive multiple of 4", self.plan_len));
        }
        if self.horizon == 0 || self.horizon >= self.plan_len {
            return fail(format!("horizon {} must be in [1, plan_len)", self.horizon));
        }
        if self.diffusion_steps < 2 {
            return fail("diffusion_steps must be at least 2".into());
        }
        if !(0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return fail(format!("need 0 < beta_start <= beta_end < 1, got {} {}", self.beta_start, self.beta_end));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return fail("cond_dropout must lie in [0, 1]".into());
        }
        if self.guidance_scale < 0.0 {
            return fail("guidance_scale must be non-negative".into());
        }
        if !(0.0 < self.ema_decay && self.ema_decay < 1.0) {
            return fail("ema_decay must lie in (0, 1)".into());
        }
        if self.loss_weight < 0.0 {
            return fail("loss_weight must be non-negative".into());
        }
        if self.skill_update_period == 0 || self.batch_size == 0 || self.skill_set_size == 0 {
            return fail("skill_update_period, batch_size and skill_set_size must be positive".into());
        }
        if self.conv_width.is_multiple_of(2) {
            return fail(format!("conv_width {} must be odd", self.conv_width));
        }
        for (name, c) in [("unet_channels", self.unet_channels), ("unet_mid_channels", self.unet_mid_channels)] {
            if c == 0 || c % self.norm_groups != 0 {
                return fail(format!("{name} {c} not divisible into {} groups", self.norm_groups));
            }
        }
        if !self.skill_embed_dim.is_multiple_of(self.skill_heads) {
            return fail("skill_embed_dim must be divisible by skill_heads".into());
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return fail("time_embed_dim must be even".into());
        }
        if self.mixing_scale.is_nan() || self.mixing_scale <= 0.0 {
            return fail("mixing_scale must be positive".into());
        }
        if self.episode_len == 0 {
            return fail("episode_len must be positive".into());
        }
        Ok(())
    }

    /// Number of skill blocks in a length-`t` trajectory.
    pub fn blocks(&self, t: usize) -> usize {
        t / self.horizon + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = PlannerConfig::default();
        assert_eq!(PlannerConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_overrides() {
        let cfg = PlannerConfig::parse("# header\nhorizon = 4 # inline\n\nguidance_scale=2.5\neval_seeds = 4, 5\n").unwrap();
        assert_eq!(cfg.horizon, 4);
        assert_eq!(cfg.guidance_scale, 2.5);
        assert_eq!(cfg.eval_seeds, vec![4, 5]);
    }

    #[test]
    fn unknown_key_fails() {
        assert!(matches!(PlannerConfig::parse("horizn = 3"), Err(Error::Config(_))));
    }

    #[test]
    fn plan_len_must_divide_by_four() {
        assert!(PlannerConfig::parse("plan_len = 18").is_err());
        assert!(PlannerConfig::parse("plan_len = 20").is_ok());
    }

    #[test]
    fn bad_number_fails() {
        assert!(PlannerConfig::parse("lr_skill = fast").is_err());
        assert!(PlannerConfig::parse("lr_skill = nan").is_err());
    }
}
