//! Command-line surface of the `skillplan` binary.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::eval::{self, evaluate};
use crate::gradsuite;
use crate::model::Planner;
use crate::numerics::Rng;
use crate::rollout::{Agent, PlannerAgent, RandomAgent};
use crate::toyworld::{generate_dataset, read_dataset, write_dataset, Family, Mixing};
use crate::training::{run_training, RunOptions};
use crate::PlannerConfig;

/// Skill-conditioned diffusion planning on a toy manipulation world.
#[derive(Debug, Parser)]
#[command(name = "skillplan", version, arg_required_else_help = true)]
pub struct Cli {
    /// Configuration file (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed of every random stream in the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Directory receiving every output.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate scripted-expert demonstrations.
    GenData {
        /// Trajectory count; defaults to the configured value.
        #[arg(long)]
        num: Option<usize>,
    },
    /// Train a planner on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        variant: Variant,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Success rates per task, instruction family and seed.
    Eval {
        #[arg(long, required_unless_present = "random")]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        variant: Variant,
        /// Evaluate the uniform random policy instead of a checkpoint.
        #[arg(long)]
        random: bool,
        /// Episodes per cell; defaults to the configured value.
        #[arg(long)]
        episodes: Option<usize>,
        /// Comma-separated families; defaults to all five.
        #[arg(long, value_delimiter = ',')]
        families: Vec<String>,
    },
    /// Word frequencies per skill code over a dataset's instructions.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        skill_set_size: Option<usize>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: usize,
    },
}

#[derive(Debug, Args)]
pub struct Variant {
    /// Condition the diffuser on language directly, without skills.
    #[arg(long)]
    pub flat: bool,
    /// Codebook size (ignored with `--flat`).
    #[arg(long)]
    pub skill_set_size: Option<usize>,
}

fn resolve_config(path: Option<&Path>, variant: Option<&Variant>) -> Result<PlannerConfig> {
    let mut cfg = match path {
        Some(p) => PlannerConfig::load(p)?,
        None => PlannerConfig::default(),
    };
    if let Some(v) = variant {
        if v.flat {
            cfg = cfg.with("flat", "true")?;
        } else if let Some(k) = v.skill_set_size {
            cfg = cfg.with("skill_set_size", &k.to_string())?;
        }
    }
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path.display(), e))
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    fs::create_dir_all(&cli.out).map_err(|e| Error::io(cli.out.display(), e))?;
    Ok(&cli.out)
}

/// Runs a parsed command; `Ok(false)` means a check failed.
pub fn execute(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::GenData { num } => {
            let cfg = resolve_config(cli.config.as_deref(), None)?;
            let mixing = Mixing::from_config(&cfg);
            let rng = Rng::new(cli.seed).fork_named("dataset");
            let n = num.unwrap_or(cfg.num_trajectories);
            let (data, summary) = generate_dataset(n, cfg.episode_len, cfg.expert_noise, &mixing, cfg.obs_noise, &rng);
            let out = out_dir(cli)?;
            write_dataset(&out.join("dataset.skdd"), &data)?;
            let mut text = String::from("task,trajectories,expert_successes\n");
            for (task, n, s) in &summary.per_task {
                text.push_str(&format!("{},{n},{s}\n", task.name()));
            }
            write(&out.join("dataset_summary.csv"), &text)?;
            println!("wrote {n} trajectories, expert success {:.3}", summary.success_rate());
            Ok(true)
        }
        Command::Train { data, variant, resume } => {
            let cfg = resolve_config(cli.config.as_deref(), Some(variant))?;
            let opts = RunOptions {
                seed: cli.seed,
                out_dir: cli.out.clone(),
                resume: *resume,
            };
            let p = run_training(data, &cfg, &opts)?;
            println!("trained {} steps, {} parameters", p.train_step, p.num_parameters());
            Ok(true)
        }
        Command::Eval {
            checkpoint,
            variant,
            random,
            episodes,
            families,
        } => {
            let cfg = resolve_config(cli.config.as_deref(), Some(variant))?;
            let families = if families.is_empty() {
                Family::ALL.to_vec()
            } else {
                families
                    .iter()
                    .map(|f| Family::parse(f).ok_or_else(|| Error::Config(format!("unknown family {f:?}"))))
                    .collect::<Result<Vec<_>>>()?
            };
            let planner;
            let random_agent = RandomAgent { action_dim: cfg.action_dim };
            let planner_agent;
            let agent: &dyn Agent = match (random, checkpoint) {
                (true, _) => &random_agent,
                (false, Some(path)) => {
                    planner = Planner::load(path, &cfg)?;
                    planner_agent = PlannerAgent::new(&planner);
                    &planner_agent
                }
                (false, None) => return Err(Error::Config("eval needs --checkpoint or --random".into())),
            };
            let n = episodes.unwrap_or(cfg.episodes_per_cell);
            let (cells, log) = evaluate(agent, &cfg, &families, &cfg.eval_seeds, n)?;
            let out = out_dir(cli)?;
            let csv = eval::eval_csv(&cells);
            write(&out.join("eval.csv"), &csv)?;
            write(&out.join("episodes.txt"), eval::episodes_log(&log))?;
            print!("{csv}");
            Ok(true)
        }
        Command::Heatmap {
            checkpoint,
            data,
            skill_set_size,
        } => {
            let variant = Variant {
                flat: false,
                skill_set_size: *skill_set_size,
            };
            let cfg = resolve_config(cli.config.as_deref(), Some(&variant))?;
            let planner = Planner::load(checkpoint, &cfg)?;
            let data = read_dataset(data)?;
            let map = eval::skill_heatmap(&planner, &data)?;
            let out = out_dir(cli)?;
            write(&out.join("heatmap.csv"), map.to_csv())?;
            let ranked = map.ranked_text(5);
            write(&out.join("heatmap_top5.txt"), &ranked)?;
            print!("{ranked}");
            println!("columns with a dominant word above 0.5: {}", map.dominant_columns(0.5));
            Ok(true)
        }
        Command::Gradcheck { seeds } => {
            let reports = gradsuite::run_suite(cli.seed, *seeds)?;
            let mut ok = true;
            for r in &reports {
                println!(
                    "{:<18} seeds={} max_rel_err={:.3e} {}",
                    r.name,
                    r.seeds,
                    r.worst,
                    if r.passed() { "pass" } else { "FAIL" }
                );
                ok &= r.passed();
            }
            Ok(ok)
        }
    }
}

/// Parses `argv` and runs it. Exit codes: 0 success, 1 failure, 2 usage.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match execute(&cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
