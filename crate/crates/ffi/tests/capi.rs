use std::ffi::{CStr, CString};
use std::ptr;

use skillplan_ffi::*;

fn last_error() -> String {
    let p = skp_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

const SMALL: &str = "unet_channels = 8\nunet_mid_channels = 16\nskill_embed_dim = 16\nskill_ff_dim = 32\ndiffusion_steps = 5\nepisode_len = 6\nhorizon = 4\nplan_len = 8\n";

#[test]
fn env_round_trip() {
    let mut env = ptr::null_mut();
    assert_eq!(unsafe { skp_env_new(ptr::null(), 0, 3, &mut env) }, SkpStatus::Ok);
    let mut obs = [0.0; 16];
    assert_eq!(unsafe { skp_env_observe(env, obs.as_mut_ptr(), 16) }, SkpStatus::Ok);
    assert!(obs.iter().any(|&v| v != 0.0));
    let a = [0.0, 0.0, 0.0, 0.0];
    assert_eq!(unsafe { skp_env_step(env, a.as_ptr(), 4) }, SkpStatus::Ok);
    let mut ok = -1;
    assert_eq!(unsafe { skp_env_succeeded(env, &mut ok) }, SkpStatus::Ok);
    assert_eq!(ok, 0);
    unsafe { skp_env_free(env) };
}

#[test]
fn bad_arguments_report_codes() {
    let mut env = ptr::null_mut();
    assert_eq!(unsafe { skp_env_new(ptr::null(), 99, 3, &mut env) }, SkpStatus::InvalidArgument);
    assert!(last_error().contains("unknown task"));
    assert_eq!(unsafe { skp_env_new(ptr::null(), 0, 3, ptr::null_mut()) }, SkpStatus::NullPointer);

    assert_eq!(unsafe { skp_env_new(ptr::null(), 0, 3, &mut env) }, SkpStatus::Ok);
    let nan = [f64::NAN, 0.0, 0.0, 0.0];
    assert_eq!(unsafe { skp_env_step(env, nan.as_ptr(), 4) }, SkpStatus::Contract);
    let mut small = [0.0; 3];
    assert_eq!(unsafe { skp_env_observe(env, small.as_mut_ptr(), 3) }, SkpStatus::InvalidArgument);
    unsafe { skp_env_free(env) };

    let bad = CString::new("horizn = 3").unwrap();
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { skp_planner_new(bad.as_ptr(), 1, &mut p) }, SkpStatus::Config);
    assert!(last_error().contains("horizn"));
    let missing = CString::new("/nonexistent/ckpt.bin").unwrap();
    assert_eq!(unsafe { skp_planner_load(missing.as_ptr(), ptr::null(), &mut p) }, SkpStatus::Io);
}

#[test]
fn planner_save_load_predict_and_roll_out() {
    let cfg = CString::new(SMALL).unwrap();
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { skp_planner_new(cfg.as_ptr(), 4, &mut p) }, SkpStatus::Ok);
    let mut n = 0;
    assert_eq!(unsafe { skp_planner_num_parameters(p, &mut n) }, SkpStatus::Ok);
    assert!(n > 0);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("p.bin").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { skp_planner_save(p, path.as_ptr()) }, SkpStatus::Ok);
    let mut q = ptr::null_mut();
    assert_eq!(unsafe { skp_planner_load(path.as_ptr(), cfg.as_ptr(), &mut q) }, SkpStatus::Ok);
    let mut r = ptr::null_mut();
    assert_eq!(unsafe { skp_planner_load(path.as_ptr(), ptr::null(), &mut r) }, SkpStatus::Config);

    let raw = [0.1; 16];
    let instr = CString::new("close the drawer").unwrap();
    let (mut a, mut b) = (-5, -5);
    assert_eq!(unsafe { skp_planner_predict_skill(p, raw.as_ptr(), 16, instr.as_ptr(), &mut a) }, SkpStatus::Ok);
    assert_eq!(unsafe { skp_planner_predict_skill(q, raw.as_ptr(), 16, instr.as_ptr(), &mut b) }, SkpStatus::Ok);
    assert!((0..20).contains(&a) && a == b);

    let mut env = ptr::null_mut();
    assert_eq!(unsafe { skp_env_new(cfg.as_ptr(), 0, 9, &mut env) }, SkpStatus::Ok);
    let (mut ok, mut steps) = (-1, 0);
    assert_eq!(unsafe { skp_planner_rollout(q, env, instr.as_ptr(), 2, &mut ok, &mut steps) }, SkpStatus::Ok);
    assert_eq!(steps, 6);
    assert!(ok == 0 || ok == 1);
    unsafe {
        skp_env_free(env);
        skp_planner_free(p);
        skp_planner_free(q);
        skp_planner_free(ptr::null_mut());
    }
}

#[test]
fn task_names_match_library() {
    assert_eq!(skp_task_count(), 6);
    for (i, t) in skillplan::toyworld::Task::ALL.iter().enumerate() {
        let name = unsafe { CStr::from_ptr(skp_task_name(i as u32)) };
        assert_eq!(name.to_str().unwrap(), t.name());
    }
    assert!(skp_task_name(6).is_null());
    let v = unsafe { CStr::from_ptr(skp_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/skillplan.h")).unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 14);
    for f in exports {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
}
