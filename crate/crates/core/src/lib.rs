//! Hierarchical skill-conditioned diffusion planning.
//!
//! A skill predictor maps (instruction, observation) embeddings onto a small
//! discrete codebook; the selected code conditions a classifier-free guided
//! diffusion model over future observation embeddings, and an inverse
//! dynamics model turns consecutive planned embeddings into actions.

pub mod cli;
pub mod config;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod invdyn;
pub mod model;
pub mod numerics;
pub mod rollout;
pub mod skill;
pub mod toyworld;
pub mod training;

pub use config::PlannerConfig;
pub use error::{Error, Result};

/// Stops glibc from returning the large per-step training buffers to the
/// kernel; mapping and zeroing fresh pages otherwise costs about a fifth of a
/// training step. Process-wide, so only binaries should call it.
pub fn keep_large_allocations() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator thresholds.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}
