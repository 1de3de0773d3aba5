//! C ABI over the quadrace simulator and policy runtime.
//!
//! Every function returns a [`QrStatus`]; on failure a description is kept
//! per thread and can be copied out with [`qr_last_error_message`]. Handles
//! are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use quadrace::dynamics::{ModelParams, MotorCommand};
use quadrace::env::{self, DoneReason, EpisodeState, ACT_DIM, OBS_DIM};
use quadrace::policy::{PolicyError, PolicyParams};
use quadrace::track::{self, Track};

pub const QR_OBS_DIM: usize = 20;
pub const QR_ACT_DIM: usize = 4;
pub const QR_STATE_DIM: usize = 16;

const _: () = assert!(QR_OBS_DIM == OBS_DIM && QR_ACT_DIM == ACT_DIM);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    CorruptCheckpoint = 4,
    EpisodeDone = 5,
    Panic = 6,
}

/// Why an episode ended; `Running` while it is live.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QrDoneReason {
    Running = 0,
    Collision = 1,
    GateMiss = 2,
    Timeout = 3,
    NumericBlowup = 4,
}

impl From<DoneReason> for QrDoneReason {
    fn from(r: DoneReason) -> Self {
        match r {
            DoneReason::Running => Self::Running,
            DoneReason::Collision => Self::Collision,
            DoneReason::GateMiss => Self::GateMiss,
            DoneReason::Timeout => Self::Timeout,
            DoneReason::NumericBlowup => Self::NumericBlowup,
        }
    }
}

/// Result of one environment step.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct QrStep {
    pub reward: f64,
    pub done: bool,
    pub truncated: bool,
    pub reason: QrDoneReason,
    pub gates_passed: u32,
    pub target_gate: u32,
}

/// Single racing environment.
pub struct QrEnv {
    track: Track,
    params: ModelParams,
    episode: Option<EpisodeState>,
}

/// Loaded policy checkpoint.
pub struct QrPolicy {
    params: PolicyParams<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: QrStatus, msg: impl Into<String>) -> QrStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn guard(f: impl FnOnce() -> QrStatus) -> QrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(QrStatus::Panic, "internal panic"),
    }
}

unsafe fn opt_str<'a>(s: *const c_char) -> Result<Option<&'a str>, QrStatus> {
    if s.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(s)
        .to_str()
        .map(Some)
        .map_err(|_| fail(QrStatus::InvalidArgument, "string is not valid UTF-8"))
}

/// Copies the last error message of this thread into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn qr_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Creates an environment. `params_json` and `track_json` hold JSON text;
/// null selects the 5-inch airframe and the figure-eight track.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qr_env_new(
    params_json: *const c_char,
    track_json: *const c_char,
    out: *mut *mut QrEnv,
) -> QrStatus {
    guard(|| {
        if out.is_null() {
            return fail(QrStatus::NullPointer, "out is null");
        }
        let params = match opt_str(params_json) {
            Ok(None) => ModelParams::five_inch(),
            Ok(Some(s)) => match serde_json::from_str::<ModelParams>(s) {
                Ok(p) => p,
                Err(e) => return fail(QrStatus::InvalidArgument, format!("params: {e}")),
            },
            Err(s) => return s,
        };
        let track = match opt_str(track_json) {
            Ok(None) => track::default_figure8(),
            Ok(Some(s)) => match Track::from_json_str(s) {
                Ok(t) => t,
                Err(e) => return fail(QrStatus::InvalidArgument, format!("track: {e}")),
            },
            Err(s) => return s,
        };
        *out = Box::into_raw(Box::new(QrEnv {
            track,
            params,
            episode: None,
        }));
        QrStatus::Ok
    })
}

/// # Safety
/// `env` must be null or a handle from [`qr_env_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn qr_env_free(env: *mut QrEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Starts an episode from `seed` and writes the observation.
///
/// # Safety
/// `env` must be a live handle; `obs` must hold `QR_OBS_DIM` doubles.
#[no_mangle]
pub unsafe extern "C" fn qr_env_reset(env: *mut QrEnv, seed: u64, obs: *mut f64) -> QrStatus {
    guard(|| {
        let (Some(e), false) = (env.as_mut(), obs.is_null()) else {
            return fail(QrStatus::NullPointer, "env or obs is null");
        };
        let ep = env::reset(&e.track, &e.params, seed);
        let o = env::observe(&ep, &e.track);
        ptr::copy_nonoverlapping(o.0.as_ptr(), obs, OBS_DIM);
        e.episode = Some(ep);
        QrStatus::Ok
    })
}

/// Applies motor commands `u` (clipped to `[0, 1]`) for one 10 ms step.
///
/// # Safety
/// `env` must be a live handle; `u` must hold `QR_ACT_DIM` doubles, `obs`
/// `QR_OBS_DIM` writable doubles and `result` one writable [`QrStep`].
#[no_mangle]
pub unsafe extern "C" fn qr_env_step(
    env: *mut QrEnv,
    u: *const f64,
    obs: *mut f64,
    result: *mut QrStep,
) -> QrStatus {
    guard(|| {
        let Some(e) = env.as_mut() else {
            return fail(QrStatus::NullPointer, "env is null");
        };
        if u.is_null() || obs.is_null() || result.is_null() {
            return fail(QrStatus::NullPointer, "u, obs or result is null");
        }
        let Some(ep) = e.episode.as_mut() else {
            return fail(QrStatus::EpisodeDone, "call qr_env_reset first");
        };
        let mut cmd = [0.0; ACT_DIM];
        ptr::copy_nonoverlapping(u, cmd.as_mut_ptr(), ACT_DIM);
        match env::step(ep, &MotorCommand::clipped(cmd), &e.track, &e.params) {
            Ok(r) => {
                ptr::copy_nonoverlapping(r.observation.0.as_ptr(), obs, OBS_DIM);
                *result = QrStep {
                    reward: r.reward,
                    done: r.done,
                    truncated: r.info.truncated,
                    reason: r.info.done_reason.into(),
                    gates_passed: ep.gates_passed as u32,
                    target_gate: ep.target_gate as u32,
                };
                QrStatus::Ok
            }
            Err(err) => fail(QrStatus::EpisodeDone, err.to_string()),
        }
    })
}

/// Copies the 16-element state `(p, v, euler, rates, rotor)` into `state`.
///
/// # Safety
/// `env` must be a live handle; `state` must hold `QR_STATE_DIM` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn qr_env_state(env: *const QrEnv, state: *mut f64) -> QrStatus {
    guard(|| {
        let (Some(e), false) = (env.as_ref(), state.is_null()) else {
            return fail(QrStatus::NullPointer, "env or state is null");
        };
        let Some(ep) = &e.episode else {
            return fail(QrStatus::EpisodeDone, "call qr_env_reset first");
        };
        let s: [f64; QR_STATE_DIM] = ep.quad.as_array();
        ptr::copy_nonoverlapping(s.as_ptr(), state, QR_STATE_DIM);
        QrStatus::Ok
    })
}

/// Loads a checkpoint from its JSON manifest path.
///
/// # Safety
/// `manifest_path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qr_policy_load(manifest_path: *const c_char, out: *mut *mut QrPolicy) -> QrStatus {
    guard(|| {
        if out.is_null() {
            return fail(QrStatus::NullPointer, "out is null");
        }
        let path = match opt_str(manifest_path) {
            Ok(Some(p)) => p,
            Ok(None) => return fail(QrStatus::NullPointer, "manifest_path is null"),
            Err(s) => return s,
        };
        match PolicyParams::<f32>::load(Path::new(path)) {
            Ok((params, _)) => {
                *out = Box::into_raw(Box::new(QrPolicy { params }));
                QrStatus::Ok
            }
            Err(PolicyError::Io(e)) => fail(QrStatus::Io, e.to_string()),
            Err(e) => fail(QrStatus::CorruptCheckpoint, e.to_string()),
        }
    })
}

/// # Safety
/// `policy` must be null or a handle from [`qr_policy_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn qr_policy_free(policy: *mut QrPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Deterministic motor command (clipped action mean) for `obs`.
///
/// # Safety
/// `policy` must be a live handle; `obs` must hold `QR_OBS_DIM` doubles and
/// `u` `QR_ACT_DIM` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn qr_policy_act(policy: *const QrPolicy, obs: *const f64, u: *mut f64) -> QrStatus {
    guard(|| {
        let Some(p) = policy.as_ref() else {
            return fail(QrStatus::NullPointer, "policy is null");
        };
        if obs.is_null() || u.is_null() {
            return fail(QrStatus::NullPointer, "obs or u is null");
        }
        let mut o = [0.0; OBS_DIM];
        ptr::copy_nonoverlapping(obs, o.as_mut_ptr(), OBS_DIM);
        if o.iter().any(|x| !x.is_finite()) {
            return fail(QrStatus::InvalidArgument, "observation is not finite");
        }
        let cmd = p.params.act_deterministic(&env::Observation(o)).values();
        ptr::copy_nonoverlapping(cmd.as_ptr(), u, ACT_DIM);
        QrStatus::Ok
    })
}

/// Number of parameters in the loaded policy.
///
/// # Safety
/// `policy` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn qr_policy_param_count(policy: *const QrPolicy) -> usize {
    policy.as_ref().map_or(0, |p| p.params.len())
}
