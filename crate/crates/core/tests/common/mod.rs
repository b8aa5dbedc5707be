#![allow(dead_code)]

use std::path::{Path, PathBuf};

use skillplan::numerics::Rng;
use skillplan::toyworld::{generate_dataset, write_dataset, Mixing};
use skillplan::PlannerConfig;

/// Toy-world dimensions with a network small enough to train in tests.
pub fn tiny_config() -> PlannerConfig {
    PlannerConfig {
        obs_embed_dim: 8,
        lang_dim: 8,
        skill_set_size: 4,
        code_dim: 4,
        skill_embed_dim: 8,
        skill_heads: 2,
        skill_ff_dim: 12,
        lambda_hidden: 8,
        cond_dim: 8,
        diffusion_steps: 8,
        plan_len: 8,
        horizon: 4,
        unet_channels: 4,
        unet_mid_channels: 8,
        conv_width: 3,
        norm_groups: 2,
        time_embed_dim: 4,
        invdyn_hidden: 16,
        batch_size: 4,
        train_steps: 6,
        checkpoint_every: 3,
        skill_update_period: 2,
        episode_len: 8,
        num_trajectories: 12,
        episodes_per_cell: 1,
        eval_seeds: vec![1],
        ..PlannerConfig::default()
    }
}

/// Writes a dataset generated under `cfg` to `dir/dataset.skdd`.
pub fn write_tiny_dataset(dir: &Path, cfg: &PlannerConfig, n: usize) -> PathBuf {
    let mixing = Mixing::from_config(cfg);
    let (d, _) = generate_dataset(n, cfg.episode_len, cfg.expert_noise, &mixing, cfg.obs_noise, &Rng::new(4));
    let path = dir.join("dataset.skdd");
    write_dataset(&path, &d).unwrap();
    path
}
