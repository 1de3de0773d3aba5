use std::ffi::{c_char, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use quadrace::dynamics::ModelParams;
use quadrace::env;
use quadrace::policy::{PolicyParams, PolicyShape};
use quadrace::track;
use quadrace_ffi::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { qr_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

#[test]
fn env_matches_rust_api() {
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { qr_env_new(ptr::null(), ptr::null(), &mut handle) }, QrStatus::Ok);

    let mut obs = [0.0; QR_OBS_DIM];
    assert_eq!(unsafe { qr_env_reset(handle, 17, obs.as_mut_ptr()) }, QrStatus::Ok);

    let track = track::default_figure8();
    let params = ModelParams::five_inch();
    let mut ep = env::reset(&track, &params, 17);
    assert_eq!(obs, env::observe(&ep, &track).0);

    let u = [0.6, 0.55, 0.5, 0.45];
    let mut result = QrStep {
        reward: 0.0,
        done: false,
        truncated: false,
        reason: QrDoneReason::Running,
        gates_passed: 0,
        target_gate: 0,
    };
    for _ in 0..20 {
        let status = unsafe { qr_env_step(handle, u.as_ptr(), obs.as_mut_ptr(), &mut result) };
        let expected = env::step(&mut ep, &quadrace::dynamics::MotorCommand::clipped(u), &track, &params);
        match expected {
            Ok(r) => {
                assert_eq!(status, QrStatus::Ok);
                assert_eq!(obs, r.observation.0);
                assert_eq!(result.reward, r.reward);
                assert_eq!(result.done, r.done);
            }
            Err(_) => {
                assert_eq!(status, QrStatus::EpisodeDone);
                break;
            }
        }
    }
    let mut state = [0.0; QR_STATE_DIM];
    assert_eq!(unsafe { qr_env_state(handle, state.as_mut_ptr()) }, QrStatus::Ok);
    assert_eq!(state, ep.quad.as_array());
    unsafe { qr_env_free(handle) };
}

#[test]
fn errors_are_reported() {
    let mut obs = [0.0; QR_OBS_DIM];
    assert_eq!(unsafe { qr_env_reset(ptr::null_mut(), 0, obs.as_mut_ptr()) }, QrStatus::NullPointer);
    assert!(last_error().contains("null"));

    let bad = CString::new("{\"k_omega_hat\": 1}").unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { qr_env_new(bad.as_ptr(), ptr::null(), &mut handle) }, QrStatus::InvalidArgument);
    assert!(handle.is_null());
    assert!(last_error().starts_with("params"));

    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { qr_env_new(ptr::null(), ptr::null(), &mut handle) }, QrStatus::Ok);
    let u = [0.5; QR_ACT_DIM];
    let mut step = std::mem::MaybeUninit::<QrStep>::uninit();
    let status = unsafe { qr_env_step(handle, u.as_ptr(), obs.as_mut_ptr(), step.as_mut_ptr()) };
    assert_eq!(status, QrStatus::EpisodeDone);
    unsafe { qr_env_free(handle) };

    let missing = CString::new("/nonexistent/policy.json").unwrap();
    let mut policy = ptr::null_mut();
    assert_eq!(unsafe { qr_policy_load(missing.as_ptr(), &mut policy) }, QrStatus::Io);
    unsafe { qr_policy_free(ptr::null_mut()) };
    unsafe { qr_env_free(ptr::null_mut()) };
}

#[test]
fn policy_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let params = PolicyParams::<f32>::init(PolicyShape::default(), &mut ChaCha8Rng::seed_from_u64(3));
    let manifest = params.save(dir.path(), "net", 0, serde_json::Value::Null).unwrap();

    let path = CString::new(manifest.to_str().unwrap()).unwrap();
    let mut policy = ptr::null_mut();
    assert_eq!(unsafe { qr_policy_load(path.as_ptr(), &mut policy) }, QrStatus::Ok);
    assert_eq!(unsafe { qr_policy_param_count(policy) }, params.len());

    let obs: [f64; QR_OBS_DIM] = std::array::from_fn(|i| (i as f64 * 0.37).sin());
    let mut u = [0.0; QR_ACT_DIM];
    assert_eq!(unsafe { qr_policy_act(policy, obs.as_ptr(), u.as_mut_ptr()) }, QrStatus::Ok);
    assert_eq!(u, params.act_deterministic(&env::Observation(obs)).values());

    let mut nan = obs;
    nan[3] = f64::NAN;
    assert_eq!(unsafe { qr_policy_act(policy, nan.as_ptr(), u.as_mut_ptr()) }, QrStatus::InvalidArgument);
    unsafe { qr_policy_free(policy) };

    std::fs::write(dir.path().join("net.bin"), [0u8; 12]).unwrap();
    let mut policy = ptr::null_mut();
    assert_eq!(unsafe { qr_policy_load(path.as_ptr(), &mut policy) }, QrStatus::CorruptCheckpoint);
}

fn header_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include").join("quadrace.h")
}

#[test]
fn header_declares_api() {
    let header = std::fs::read_to_string(header_path()).unwrap();
    for name in [
        "qr_env_new",
        "qr_env_reset",
        "qr_env_step",
        "qr_env_state",
        "qr_env_free",
        "qr_policy_load",
        "qr_policy_act",
        "qr_policy_free",
        "qr_last_error_message",
        "#define QR_OBS_DIM 20",
        "#define QR_ACT_DIM 4",
        "QR_STATUS_CORRUPT_CHECKPOINT = 4",
        "typedef struct QrEnv QrEnv;",
    ] {
        assert!(header.contains(name), "header is missing {name}");
    }
}

const C_PROGRAM: &str = r#"
#include "quadrace.h"
#include <stdio.h>

int main(void) {
    QrEnv *env = NULL;
    if (qr_env_new(NULL, NULL, &env) != QR_STATUS_OK) return 1;
    double obs[QR_OBS_DIM];
    double u[QR_ACT_DIM] = {0.5, 0.5, 0.5, 0.5};
    QrStep step;
    if (qr_env_reset(env, 5, obs) != QR_STATUS_OK) return 2;
    int n = 0;
    while (n < 2000) {
        if (qr_env_step(env, u, obs, &step) != QR_STATUS_OK) return 3;
        n++;
        if (step.done) break;
    }
    if (qr_env_step(env, u, obs, &step) != QR_STATUS_EPISODE_DONE) return 4;
    char msg[64];
    qr_last_error_message(msg, sizeof msg);
    qr_env_free(env);
    printf("%d %d\n", n, (int)step.reason);
    return 0;
}
"#;

#[test]
fn header_compiles_and_links_from_c() {
    let Some(cc) = ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok())
    else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    // target/<profile>/deps/c_api-xxxx -> target/<profile>
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libquadrace_ffi.so");
    if !lib.exists() {
        eprintln!("{} not built; skipping link step", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let bin = dir.path().join("main");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let status = Command::new(cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header_path().parent().unwrap())
        .arg(&src)
        .arg("-o")
        .arg(&bin)
        .arg(format!("-L{}", profile_dir.display()))
        .arg("-lquadrace_ffi")
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin)
        .env("LD_LIBRARY_PATH", profile_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut fields = text.split_whitespace().map(|f| f.parse::<i64>().unwrap());
    let steps = fields.next().unwrap();
    let reason = fields.next().unwrap();
    assert!((1..=1200).contains(&steps));
    assert_ne!(reason, QrDoneReason::Running as i64);
}
