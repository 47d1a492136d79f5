//! C interface to the simulator, saved policies and teleoperation sessions.
//!
//! Every function returns a [`DipaStatus`]. On failure the message is kept
//! per thread and read with [`dipa_last_error`]. Objects are opaque handles
//! created by `*_new`/`*_load` and released by the matching `*_free`.
//! Strings returned through out-parameters are owned by the caller and must
//! be released with [`dipa_string_free`].

use dipa::policy::{Imitator, PolicyBundle};
use dipa::teleop::Session;
use dipa::types::{ActionDelta, DisturbanceLevel, Mode, ACTION_DIM};
use dipa::{EnvConfig, EnvState, PickPlaceEnv, RngStream, Threshold};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DipaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    InvalidState = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

type Outcome = Result<(), (DipaStatus, String)>;

fn guard(f: impl FnOnce() -> Outcome) -> DipaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DipaStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DipaStatus::Panic
        }
    }
}

fn invalid(msg: impl std::fmt::Display) -> (DipaStatus, String) {
    (DipaStatus::InvalidArgument, msg.to_string())
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, (DipaStatus, String)> {
    p.as_ref().ok_or((DipaStatus::NullPointer, format!("{what} is null")))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (DipaStatus, String)> {
    p.as_mut().ok_or((DipaStatus::NullPointer, format!("{what} is null")))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (DipaStatus, String)> {
    if p.is_null() {
        return Err((DipaStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Outcome {
    let out = deref_mut(out, "output pointer")?;
    *out = CString::new(s.replace('\0', " ")).expect("nul bytes removed").into_raw();
    Ok(())
}

fn threshold(code: c_char) -> Result<Threshold, (DipaStatus, String)> {
    match code as u8 {
        b'L' => Ok(Threshold::L),
        b'M' => Ok(Threshold::M),
        b'S' => Ok(Threshold::S),
        other => Err(invalid(format!("threshold must be 'L', 'M' or 'S', got {other}"))),
    }
}

/// Message describing the most recent failure on this thread; empty after
/// a success. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn dipa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn dipa_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Simulator with its current state.
pub struct DipaEnv {
    env: PickPlaceEnv,
    state: EnvState,
}

/// Creates an environment with `n_objects` objects and carry threshold
/// `'L'`, `'M'` or `'S'`, reset from `seed`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dipa_env_new(n_objects: usize, threshold_code: c_char, seed: u64, out: *mut *mut DipaEnv) -> DipaStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        let config = EnvConfig { auto2_threshold: threshold(threshold_code)?, ..EnvConfig::with_objects(n_objects) };
        let env = PickPlaceEnv::new(config).map_err(invalid)?;
        let state = env.reset(&mut RngStream::derive(seed, &["reset"]).map_err(invalid)?);
        *out = Box::into_raw(Box::new(DipaEnv { env, state }));
        Ok(())
    })
}

/// # Safety
/// `env` must come from [`dipa_env_new`] and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn dipa_env_free(env: *mut DipaEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// # Safety
/// `env` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dipa_env_reset(env: *mut DipaEnv, seed: u64) -> DipaStatus {
    guard(|| {
        let e = deref_mut(env, "env")?;
        e.state = e.env.reset(&mut RngStream::derive(seed, &["reset"]).map_err(invalid)?);
        Ok(())
    })
}

/// Length of the full-state feature vector.
///
/// # Safety
/// `env` and `out_dim` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dipa_env_feature_dim(env: *const DipaEnv, out_dim: *mut usize) -> DipaStatus {
    guard(|| {
        *deref_mut(out_dim, "out_dim")? = deref(env, "env")?.env.config().full_dim();
        Ok(())
    })
}

/// Copies the full-state features into `out` (capacity `cap`).
///
/// # Safety
/// `out` must point to `cap` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dipa_env_features(env: *const DipaEnv, out: *mut f64, cap: usize) -> DipaStatus {
    guard(|| {
        let f = deref(env, "env")?.state.features();
        if out.is_null() {
            return Err((DipaStatus::NullPointer, "out is null".into()));
        }
        if cap < f.len() {
            return Err((DipaStatus::BufferTooSmall, format!("need {} doubles, got {cap}", f.len())));
        }
        std::slice::from_raw_parts_mut(out, f.len()).copy_from_slice(&f);
        Ok(())
    })
}

/// Applies `action` (dx, dy, dz, dtheta); it is clamped to the action
/// limits. Sets `done` when the episode has ended.
///
/// # Safety
/// `action` must point to 4 doubles; `done` may be null.
#[no_mangle]
pub unsafe extern "C" fn dipa_env_step(env: *mut DipaEnv, action: *const f64, done: *mut bool) -> DipaStatus {
    guard(|| {
        let e = deref_mut(env, "env")?;
        if action.is_null() {
            return Err((DipaStatus::NullPointer, "action is null".into()));
        }
        let a = ActionDelta::from_slice(std::slice::from_raw_parts(action, ACTION_DIM));
        if !a.is_finite() {
            return Err(invalid("action must be finite"));
        }
        if e.env.is_done(&e.state) {
            return Err((DipaStatus::InvalidState, "episode has ended; reset first".into()));
        }
        e.state = e.env.step(&e.state, a);
        if let Some(d) = done.as_mut() {
            *d = e.env.is_done(&e.state);
        }
        Ok(())
    })
}

/// Number of objects placed so far and whether all are placed.
///
/// # Safety
/// All pointers must be valid; `moved` and `success` may be null.
#[no_mangle]
pub unsafe extern "C" fn dipa_env_progress(env: *const DipaEnv, moved: *mut usize, success: *mut bool) -> DipaStatus {
    guard(|| {
        let e = deref(env, "env")?;
        if let Some(m) = moved.as_mut() {
            *m = e.state.moved_count;
        }
        if let Some(s) = success.as_mut() {
            *s = e.env.is_success(&e.state);
        }
        Ok(())
    })
}

/// A learned policy bundle loaded from disk.
pub struct DipaPolicy {
    bundle: PolicyBundle,
}

/// Loads a bundle directory written by the trainer.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dipa_policy_load(dir: *const c_char, out: *mut *mut DipaPolicy) -> DipaStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        let dir = str_arg(dir, "dir")?;
        let bundle = PolicyBundle::load(Path::new(dir)).map_err(|e| (DipaStatus::Io, e.to_string()))?;
        *out = Box::into_raw(Box::new(DipaPolicy { bundle }));
        Ok(())
    })
}

/// # Safety
/// `policy` must come from [`dipa_policy_load`] and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn dipa_policy_free(policy: *mut DipaPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

fn features<'a>(bundle: &PolicyBundle, p: *const f64, len: usize) -> Result<&'a [f64], (DipaStatus, String)> {
    if p.is_null() {
        return Err((DipaStatus::NullPointer, "features is null".into()));
    }
    let expected = 4 + 3 * bundle.n_objects + 1;
    if len != expected {
        return Err(invalid(format!("feature vector has length {len}, expected {expected}")));
    }
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

/// Predicts the next mode given the mode in force. Returns
/// `DIPA_STATUS_INVALID_STATE` for policies without a mode switcher.
///
/// # Safety
/// `features` must point to `len` doubles; `out_mode` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dipa_policy_predict_mode(
    policy: *const DipaPolicy,
    features_ptr: *const f64,
    len: usize,
    current: u8,
    out_mode: *mut u8,
) -> DipaStatus {
    guard(|| {
        let p = deref(policy, "policy")?;
        let out = deref_mut(out_mode, "out_mode")?;
        let full = features(&p.bundle, features_ptr, len)?;
        let current = Mode::new(current).map_err(invalid)?;
        let m = p.bundle.predict_mode(full, current).ok_or((DipaStatus::InvalidState, "policy has no mode switcher".into()))?;
        *out = m.index() as u8;
        Ok(())
    })
}

/// Action for `mode`; pass a negative `mode` for policies without modes.
///
/// # Safety
/// `features` must point to `len` doubles; `out_action` to 4 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dipa_policy_predict_action(
    policy: *const DipaPolicy,
    features_ptr: *const f64,
    len: usize,
    mode: i32,
    out_action: *mut f64,
) -> DipaStatus {
    guard(|| {
        let p = deref(policy, "policy")?;
        let full = features(&p.bundle, features_ptr, len)?;
        if out_action.is_null() {
            return Err((DipaStatus::NullPointer, "out_action is null".into()));
        }
        let mode = if mode < 0 { None } else { Some(Mode::new(u8::try_from(mode).map_err(invalid)?).map_err(invalid)?) };
        let a = p.bundle.predict_action(full, mode).to_array();
        std::slice::from_raw_parts_mut(out_action, ACTION_DIM).copy_from_slice(&a);
        Ok(())
    })
}

/// Runs `episodes` undisturbed test episodes and reports the success rate.
///
/// # Safety
/// `policy` and `out_success_rate` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dipa_policy_evaluate(
    policy: *const DipaPolicy,
    threshold_code: c_char,
    episodes: usize,
    seed: u64,
    out_success_rate: *mut f64,
) -> DipaStatus {
    guard(|| {
        let p = deref(policy, "policy")?;
        let out = deref_mut(out_success_rate, "out_success_rate")?;
        let config = EnvConfig { auto2_threshold: threshold(threshold_code)?, ..EnvConfig::with_objects(p.bundle.n_objects) };
        let env = PickPlaceEnv::new(config).map_err(invalid)?;
        *out = dipa::learner::evaluate(&p.bundle, &env, episodes, seed).0.success_rate;
        Ok(())
    })
}

/// A teleoperation session driven by JSON messages.
pub struct DipaSession {
    session: Session,
}

/// Creates a session saving episodes under `out_dir`, with disturbance
/// variances `sigma` (4 doubles) and `seed`.
///
/// # Safety
/// `out_dir` must be a NUL-terminated string, `sigma` point to 4 doubles,
/// `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn dipa_session_new(out_dir: *const c_char, sigma: *const f64, seed: u64, out: *mut *mut DipaSession) -> DipaStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        let dir = str_arg(out_dir, "out_dir")?;
        if sigma.is_null() {
            return Err((DipaStatus::NullPointer, "sigma is null".into()));
        }
        let mut s = [0.0; ACTION_DIM];
        s.copy_from_slice(std::slice::from_raw_parts(sigma, ACTION_DIM));
        let level = DisturbanceLevel::new(s, 0).map_err(invalid)?;
        *out = Box::into_raw(Box::new(DipaSession { session: Session::new(dir, level, seed) }));
        Ok(())
    })
}

/// # Safety
/// `session` must come from [`dipa_session_new`] and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn dipa_session_free(session: *mut DipaSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Handles one client message (JSON text). `out_json` receives a JSON
/// array of the server's replies; free it with [`dipa_string_free`].
/// Malformed messages are not an error here: they produce an `error` reply.
///
/// # Safety
/// `message` must be a NUL-terminated string; `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dipa_session_handle(session: *mut DipaSession, message: *const c_char, out_json: *mut *mut c_char) -> DipaStatus {
    guard(|| {
        let s = deref_mut(session, "session")?;
        let text = str_arg(message, "message")?;
        let replies = s.session.handle_text(text);
        put_string(out_json, serde_json::to_string(&replies).expect("messages serialise"))
    })
}

/// Advances the session clock by one tick. `out_json` receives a JSON
/// array of the resulting messages (empty when no episode is running).
///
/// # Safety
/// `out_json` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dipa_session_tick(session: *mut DipaSession, out_json: *mut *mut c_char) -> DipaStatus {
    guard(|| {
        let s = deref_mut(session, "session")?;
        let replies = s.session.tick();
        put_string(out_json, serde_json::to_string(&replies).expect("messages serialise"))
    })
}

/// Saves the current episode; `out_path` receives the file path.
///
/// # Safety
/// `out_path` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dipa_session_save(session: *mut DipaSession, out_path: *mut *mut c_char) -> DipaStatus {
    guard(|| {
        let s = deref_mut(session, "session")?;
        let (path, _) = s.session.save_episode().map_err(|e| match e {
            dipa::teleop::TeleopError::Io { .. } => (DipaStatus::Io, e.to_string()),
            _ => (DipaStatus::InvalidState, e.to_string()),
        })?;
        put_string(out_path, path.display().to_string())
    })
}
