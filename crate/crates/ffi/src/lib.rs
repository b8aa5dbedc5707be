//! C interface: opaque planner and environment handles, status codes and a
//! per-thread last-error message.
//!
//! Every function returns a [`SkpStatus`]. On failure the message is kept
//! until the next failing call on the same thread and can be read with
//! [`skp_last_error`]. Handles are freed with their `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use skillplan::model::Planner;
use skillplan::numerics::Rng;
use skillplan::rollout::{rollout_episode, PlannerAgent};
use skillplan::toyworld::{Env, Mixing, Task, ToyEnv};
use skillplan::{Error, PlannerConfig};

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Input = 4,
    Contract = 5,
    Format = 6,
    Training = 7,
    Io = 8,
    Panic = 9,
}

/// Planner parameters, codebook and frozen encoders.
pub struct SkpPlanner {
    inner: Planner,
}

/// One toy-world episode.
pub struct SkpEnv {
    inner: ToyEnv,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(SkpStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Config(_) => SkpStatus::Config,
            Error::Input(_) => SkpStatus::Input,
            Error::Contract(_) => SkpStatus::Contract,
            Error::Format(_) => SkpStatus::Format,
            Error::Training(_) => SkpStatus::Training,
            Error::Io { .. } => SkpStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SkpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SkpStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SkpStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(SkpStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SkpStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// A null pointer selects the default configuration.
unsafe fn config(p: *const c_char) -> Result<PlannerConfig, Failure> {
    if p.is_null() {
        return Ok(PlannerConfig::default());
    }
    Ok(PlannerConfig::parse(text(p, "config")?)?)
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn skp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn skp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Number of toy-world tasks; task ids are `0..count`.
#[no_mangle]
pub extern "C" fn skp_task_count() -> u32 {
    Task::ALL.len() as u32
}

/// Static name of task `id`, or null if out of range.
#[no_mangle]
pub extern "C" fn skp_task_name(id: u32) -> *const c_char {
    match id {
        0 => c"close_drawer".as_ptr(),
        1 => c"open_drawer".as_ptr(),
        2 => c"turn_faucet_left".as_ptr(),
        3 => c"turn_faucet_right".as_ptr(),
        4 => c"move_black_mug_right".as_ptr(),
        5 => c"move_white_mug_down".as_ptr(),
        _ => std::ptr::null(),
    }
}

/// Freshly initialised planner. `config` is configuration text or null.
///
/// # Safety
/// `config` must be null or a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn skp_planner_new(config_text: *const c_char, seed: u64, out_planner: *mut *mut SkpPlanner) -> SkpStatus {
    guard(|| {
        let slot = out(out_planner, "out_planner")?;
        let inner = Planner::new(&config(config_text)?, seed)?;
        *slot = Box::into_raw(Box::new(SkpPlanner { inner }));
        Ok(())
    })
}

/// Loads a checkpoint, checking it against `config` (text or null).
///
/// # Safety
/// `path` must be a valid C string, `config` null or a valid C string, and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn skp_planner_load(
    path: *const c_char,
    config_text: *const c_char,
    out_planner: *mut *mut SkpPlanner,
) -> SkpStatus {
    guard(|| {
        let slot = out(out_planner, "out_planner")?;
        let path = PathBuf::from(text(path, "path")?);
        let inner = Planner::load(&path, &config(config_text)?)?;
        *slot = Box::into_raw(Box::new(SkpPlanner { inner }));
        Ok(())
    })
}

/// # Safety
/// `planner` must come from this library; `path` must be a valid C string.
#[no_mangle]
pub unsafe extern "C" fn skp_planner_save(planner: *const SkpPlanner, path: *const c_char) -> SkpStatus {
    guard(|| {
        let p = planner.as_ref().ok_or_else(|| null("planner"))?;
        p.inner.save(&PathBuf::from(text(path, "path")?))?;
        Ok(())
    })
}

/// Releases a planner; null is ignored.
///
/// # Safety
/// `planner` must be null or come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn skp_planner_free(planner: *mut SkpPlanner) {
    if !planner.is_null() {
        drop(Box::from_raw(planner));
    }
}

/// Scalar count of trainable parameters plus codebook entries.
///
/// # Safety
/// `planner` must come from this library; `out_count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn skp_planner_num_parameters(planner: *const SkpPlanner, out_count: *mut u64) -> SkpStatus {
    guard(|| {
        let p = planner.as_ref().ok_or_else(|| null("planner"))?;
        *out(out_count, "out_count")? = p.inner.num_parameters() as u64;
        Ok(())
    })
}

/// Skill code the predictor selects for a raw observation and a
/// whitespace-separated instruction; `-1` for the flat variant.
///
/// # Safety
/// `raw` must point at `raw_len` doubles; `instruction` must be a valid C
/// string; `out_code` must be writable.
#[no_mangle]
pub unsafe extern "C" fn skp_planner_predict_skill(
    planner: *const SkpPlanner,
    raw: *const f64,
    raw_len: usize,
    instruction: *const c_char,
    out_code: *mut i32,
) -> SkpStatus {
    guard(|| {
        let p = &planner.as_ref().ok_or_else(|| null("planner"))?.inner;
        let obs = p.encoder.encode(slice(raw, raw_len, "raw")?)?;
        let tokens = skillplan::encoders::tokenize(text(instruction, "instruction")?);
        let lang = p.vocab.encode(&tokens)?;
        let slot = out(out_code, "out_code")?;
        let (codes, _) = p.select(&obs.reshape(&[1, p.config.obs_embed_dim])?, &lang.reshape(&[1, p.config.lang_dim])?)?;
        *slot = codes[0].map_or(-1, |k| k as i32);
        Ok(())
    })
}

/// Runs one closed-loop episode of the configured length on `env`.
///
/// # Safety
/// Handles must come from this library; `instruction` must be a valid C
/// string; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn skp_planner_rollout(
    planner: *const SkpPlanner,
    env: *mut SkpEnv,
    instruction: *const c_char,
    seed: u64,
    out_success: *mut i32,
    out_steps: *mut u64,
) -> SkpStatus {
    guard(|| {
        let p = &planner.as_ref().ok_or_else(|| null("planner"))?.inner;
        let e = &mut env.as_mut().ok_or_else(|| null("env"))?.inner;
        let tokens = skillplan::encoders::tokenize(text(instruction, "instruction")?);
        let (success, steps) = (out(out_success, "out_success")?, out(out_steps, "out_steps")?);
        let agent = PlannerAgent::new(p);
        let r = rollout_episode(&agent, e, &tokens, p.config.episode_len, p.config.horizon, &mut Rng::new(seed))?;
        *success = r.success as i32;
        *steps = r.steps() as u64;
        Ok(())
    })
}

/// New episode of task `task` (see [`skp_task_name`]). `config` supplies the
/// observation width, noise and mixing seed; null selects the defaults.
///
/// # Safety
/// `config` must be null or a valid C string; `out_env` must be writable.
#[no_mangle]
pub unsafe extern "C" fn skp_env_new(config_text: *const c_char, task: u32, seed: u64, out_env: *mut *mut SkpEnv) -> SkpStatus {
    guard(|| {
        let slot = out(out_env, "out_env")?;
        let cfg = config(config_text)?;
        let task = u8::try_from(task)
            .ok()
            .and_then(|t| Task::from_id(t).ok())
            .ok_or_else(|| Failure(SkpStatus::InvalidArgument, format!("unknown task {task}")))?;
        let mixing = Mixing::from_config(&cfg);
        let inner = ToyEnv::new(task, mixing, cfg.obs_noise, &mut Rng::new(seed));
        *slot = Box::into_raw(Box::new(SkpEnv { inner }));
        Ok(())
    })
}

/// Writes the current raw observation into `buf[..len]`; `len` must equal
/// the observation width.
///
/// # Safety
/// `env` must come from this library; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn skp_env_observe(env: *mut SkpEnv, buf: *mut f64, len: usize) -> SkpStatus {
    guard(|| {
        let e = &mut env.as_mut().ok_or_else(|| null("env"))?.inner;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let obs = e.observe();
        if obs.len() != len {
            return Err(Failure(
                SkpStatus::InvalidArgument,
                format!("buffer holds {len} values, observation has {}", obs.len()),
            ));
        }
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(&obs);
        Ok(())
    })
}

/// # Safety
/// `env` must come from this library; `action` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn skp_env_step(env: *mut SkpEnv, action: *const f64, len: usize) -> SkpStatus {
    guard(|| {
        let e = &mut env.as_mut().ok_or_else(|| null("env"))?.inner;
        e.step(slice(action, len, "action")?)?;
        Ok(())
    })
}

/// # Safety
/// `env` must come from this library; `out_success` must be writable.
#[no_mangle]
pub unsafe extern "C" fn skp_env_succeeded(env: *const SkpEnv, out_success: *mut i32) -> SkpStatus {
    guard(|| {
        let e = &env.as_ref().ok_or_else(|| null("env"))?.inner;
        *out(out_success, "out_success")? = e.succeeded() as i32;
        Ok(())
    })
}

/// Releases an environment; null is ignored.
///
/// # Safety
/// `env` must be null or come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn skp_env_free(env: *mut SkpEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}
