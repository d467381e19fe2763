//! C ABI over the guidelab scoring functions, trajectories and environments.
//!
//! Every function returns a [`GlStatus`]; results come back through out
//! pointers. On failure a message is available from [`gl_last_error`] on the
//! same thread. Handles are opaque and must be released with their `_free`
//! function. Strings returned by the library are released with
//! [`gl_string_free`].
//!
//! Polarities cross the boundary as their sign: -1 negative, 0 neutral,
//! 1 positive. Schedule breakpoints use -1 for "never".

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use guidelab::analysis::{hindsight_judge, JudgeInput, ReasonQuality, StudentLabel};
use guidelab::env::{EnvKind, EnvSpec, Environment};
use guidelab::optimizer::{self, ClipConfig};
use guidelab::reward::{self, CompositeReturnConfig, TrustSchedule, NEVER};
use guidelab::trajectory::{Observation, Polarity, Trajectory};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Env = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// Reason-quality codes for [`gl_hindsight_judge`].
pub const GL_REASON_SUPPORTS: i32 = 0;
pub const GL_REASON_CONTRADICTS: i32 = 1;
pub const GL_REASON_GENERIC: i32 = 2;

/// Result of one environment step.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct GlStepResult {
    pub env_reward: f64,
    pub done: bool,
    pub success: bool,
}

/// Opaque trajectory handle.
pub struct GlTrajectory(Trajectory);

/// Opaque environment handle.
pub struct GlEnv(Box<dyn Environment>);

struct Failure(GlStatus, String);

type FfiResult = Result<(), Failure>;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(GlStatus::InvalidArgument, msg.into())
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> FfiResult) -> GlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GlStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            GlStatus::Panic
        }
    }
}

fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: the caller guarantees a non-null `p` points to writable storage.
    unsafe { p.as_mut() }.ok_or_else(|| Failure(GlStatus::NullPointer, format!("{name} is null")))
}

fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(GlStatus::NullPointer, format!("{name} is null")));
    }
    // SAFETY: non-null and NUL-terminated per the API contract.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| invalid(format!("{name} is not valid UTF-8")))
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| invalid("string contains NUL"))
}

fn polarity(sign: i32) -> Result<Polarity, Failure> {
    match sign {
        -1 => Ok(Polarity::Negative),
        0 => Ok(Polarity::Neutral),
        1 => Ok(Polarity::Positive),
        other => Err(invalid(format!("polarity must be -1, 0 or 1, got {other}"))),
    }
}

fn breakpoint(v: i64, name: &str) -> Result<u64, Failure> {
    match v {
        -1 => Ok(NEVER),
        v if v >= 0 => Ok(v as u64),
        v => Err(invalid(format!("{name} must be >= 0 or -1, got {v}"))),
    }
}

fn observation_json(o: &Observation) -> Result<*mut c_char, Failure> {
    let s = serde_json::to_string(o).map_err(|e| invalid(e.to_string()))?;
    into_c_string(s)
}

/// Message for the most recent failure on this thread, or an empty string.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| match &*e.borrow() {
        Some(c) => c.as_ptr(),
        None => c"".as_ptr(),
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn gl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Trust coefficient lambda(u) of the four-breakpoint schedule.
#[no_mangle]
pub extern "C" fn gl_trust_coefficient(
    u: f64,
    warmup_end: i64,
    ramp_end: i64,
    hold_end: i64,
    anneal_end: i64,
    out_lambda: *mut f64,
) -> GlStatus {
    guard(|| {
        let o = out(out_lambda, "out_lambda")?;
        if !(u.is_finite() && u >= 0.0) {
            return Err(invalid(format!("u must be finite and >= 0, got {u}")));
        }
        let s = TrustSchedule::new(
            breakpoint(warmup_end, "warmup_end")?,
            breakpoint(ramp_end, "ramp_end")?,
            breakpoint(hold_end, "hold_end")?,
            breakpoint(anneal_end, "anneal_end")?,
        )
        .map_err(|e| invalid(e.to_string()))?;
        *o = s.trust_coefficient(u);
        Ok(())
    })
}

/// Per-step internal reward for a polarity sign at the given magnitude.
#[no_mangle]
pub extern "C" fn gl_polarity_to_reward(polarity_sign: i32, magnitude: f64, out_reward: *mut f64) -> GlStatus {
    guard(|| {
        let o = out(out_reward, "out_reward")?;
        let cfg = CompositeReturnConfig {
            polarity_magnitude: magnitude,
            ..CompositeReturnConfig::default()
        };
        cfg.validate().map_err(|e| invalid(e.to_string()))?;
        *o = reward::polarity_to_reward(polarity(polarity_sign)?, &cfg);
        Ok(())
    })
}

/// Group-normalized advantages of `n` returns, written to `out_advantages`
/// (room for `n` values).
///
/// # Safety
/// `returns` must point to `n` readable values and `out_advantages` to `n`
/// writable ones.
#[no_mangle]
pub unsafe extern "C" fn gl_group_advantages(
    returns: *const f64,
    n: usize,
    adv_epsilon: f64,
    out_advantages: *mut f64,
) -> GlStatus {
    guard(|| {
        if returns.is_null() || out_advantages.is_null() {
            return Err(Failure(GlStatus::NullPointer, "returns or out_advantages is null".into()));
        }
        if n < 2 {
            return Err(invalid(format!("group needs at least 2 returns, got {n}")));
        }
        if !(adv_epsilon.is_finite() && adv_epsilon > 0.0) {
            return Err(invalid(format!("adv_epsilon must be finite and > 0, got {adv_epsilon}")));
        }
        let r = std::slice::from_raw_parts(returns, n);
        if r.iter().any(|x| !x.is_finite()) {
            return Err(invalid("returns must be finite"));
        }
        let a = optimizer::group_advantages(r, adv_epsilon);
        std::slice::from_raw_parts_mut(out_advantages, n).copy_from_slice(&a);
        Ok(())
    })
}

/// Clipped surrogate `min(r*A, clip(r, 1-eps_low, 1+eps_high)*A)`. Equal
/// epsilons give the symmetric form.
#[no_mangle]
pub extern "C" fn gl_clipped_surrogate(
    ratio: f64,
    advantage: f64,
    eps_low: f64,
    eps_high: f64,
    out_value: *mut f64,
) -> GlStatus {
    guard(|| {
        let o = out(out_value, "out_value")?;
        let clip = ClipConfig::dapo(eps_low, eps_high);
        clip.validate().map_err(|e| invalid(e.to_string()))?;
        if !(ratio.is_finite() && ratio >= 0.0 && advantage.is_finite()) {
            return Err(invalid("ratio must be finite and >= 0, advantage finite"));
        }
        *o = optimizer::clipped_surrogate(ratio, advantage, &clip);
        Ok(())
    })
}

/// Hindsight-judge score. A `student_sign` outside -1..=1 is an invalid
/// (unparseable) student label. `reason` is one of the `GL_REASON_*` codes.
#[no_mangle]
pub extern "C" fn gl_hindsight_judge(student_sign: i32, oracle_sign: i32, reason: i32, out_score: *mut f64) -> GlStatus {
    guard(|| {
        let o = out(out_score, "out_score")?;
        let student_label = polarity(student_sign).map_or(StudentLabel::Invalid, StudentLabel::Valid);
        let reason_quality = match reason {
            GL_REASON_SUPPORTS => ReasonQuality::Supports,
            GL_REASON_CONTRADICTS => ReasonQuality::Contradicts,
            GL_REASON_GENERIC => ReasonQuality::Generic,
            other => return Err(invalid(format!("unknown reason code {other}"))),
        };
        *o = hindsight_judge(&JudgeInput {
            student_label,
            oracle_label: polarity(oracle_sign)?,
            reason_quality,
        });
        Ok(())
    })
}

/// Parses one trajectory from its JSON-line form.
#[no_mangle]
pub extern "C" fn gl_trajectory_from_json(json: *const c_char, out_traj: *mut *mut GlTrajectory) -> GlStatus {
    guard(|| {
        let o = out(out_traj, "out_traj")?;
        let t = Trajectory::from_json_line(str_arg(json, "json")?)
            .map_err(|e| Failure(GlStatus::Parse, e.to_string()))?;
        *o = Box::into_raw(Box::new(GlTrajectory(t)));
        Ok(())
    })
}

/// # Safety
/// `t` must come from [`gl_trajectory_from_json`] and not be freed already.
#[no_mangle]
pub unsafe extern "C" fn gl_trajectory_free(t: *mut GlTrajectory) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

fn traj<'a>(t: *const GlTrajectory) -> Result<&'a Trajectory, Failure> {
    // SAFETY: non-null handles come from gl_trajectory_from_json.
    unsafe { t.as_ref() }
        .map(|t| &t.0)
        .ok_or_else(|| Failure(GlStatus::NullPointer, "trajectory is null".into()))
}

#[no_mangle]
pub extern "C" fn gl_trajectory_len(t: *const GlTrajectory, out_len: *mut usize) -> GlStatus {
    guard(|| {
        *out(out_len, "out_len")? = traj(t)?.len();
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn gl_trajectory_env_reward(t: *const GlTrajectory, out_reward: *mut f64) -> GlStatus {
    guard(|| {
        *out(out_reward, "out_reward")? = traj(t)?.env_reward();
        Ok(())
    })
}

/// Composite return at stage `u`. `config_json` is a composite-return config
/// object (`polarity_magnitude`, `schedule`, `length_normalized`); null
/// selects the defaults.
#[no_mangle]
pub extern "C" fn gl_trajectory_composite_return(
    t: *const GlTrajectory,
    u: f64,
    config_json: *const c_char,
    out_return: *mut f64,
) -> GlStatus {
    guard(|| {
        let o = out(out_return, "out_return")?;
        let cfg: CompositeReturnConfig = if config_json.is_null() {
            CompositeReturnConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?)
                .map_err(|e| Failure(GlStatus::Parse, e.to_string()))?
        };
        cfg.validate().map_err(|e| invalid(e.to_string()))?;
        if !(u.is_finite() && u >= 0.0) {
            return Err(invalid(format!("u must be finite and >= 0, got {u}")));
        }
        *o = reward::composite_return(traj(t)?, u, &cfg);
        Ok(())
    })
}

/// Serializes the trajectory as one JSON line. Free with [`gl_string_free`].
#[no_mangle]
pub extern "C" fn gl_trajectory_to_json(t: *const GlTrajectory, out_json: *mut *mut c_char) -> GlStatus {
    guard(|| {
        let o = out(out_json, "out_json")?;
        let s = traj(t)?.to_json_line().map_err(|e| invalid(e.to_string()))?;
        *o = into_c_string(s)?;
        Ok(())
    })
}

/// Creates an environment. `spec_json` is either a bare kind name
/// (`keydoor`, `chainlab`, `noisyshop`) for the defaults or a full spec
/// object tagged with `"kind"`.
#[no_mangle]
pub extern "C" fn gl_env_new(spec_json: *const c_char, out_env: *mut *mut GlEnv) -> GlStatus {
    guard(|| {
        let o = out(out_env, "out_env")?;
        let s = str_arg(spec_json, "spec_json")?.trim();
        let spec = if s.starts_with('{') {
            serde_json::from_str::<EnvSpec>(s).map_err(|e| Failure(GlStatus::Parse, e.to_string()))?
        } else {
            EnvSpec::default_for(s.parse::<EnvKind>().map_err(|e| invalid(e.to_string()))?)
        };
        spec.validate().map_err(|e| invalid(e.to_string()))?;
        *o = Box::into_raw(Box::new(GlEnv(spec.build())));
        Ok(())
    })
}

/// # Safety
/// `env` must come from [`gl_env_new`] and not be freed already.
#[no_mangle]
pub unsafe extern "C" fn gl_env_free(env: *mut GlEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

fn env_mut<'a>(env: *mut GlEnv) -> Result<&'a mut (dyn Environment + 'static), Failure> {
    // SAFETY: non-null handles come from gl_env_new.
    unsafe { env.as_mut() }
        .map(|e| e.0.as_mut())
        .ok_or_else(|| Failure(GlStatus::NullPointer, "env is null".into()))
}

/// Starts an episode. If `out_observation_json` is non-null it receives the
/// initial observation as JSON (free with [`gl_string_free`]).
#[no_mangle]
pub extern "C" fn gl_env_reset(env: *mut GlEnv, seed: u64, out_observation_json: *mut *mut c_char) -> GlStatus {
    guard(|| {
        let obs = env_mut(env)?.reset(seed);
        if !out_observation_json.is_null() {
            *out(out_observation_json, "out_observation_json")? = observation_json(&obs)?;
        }
        Ok(())
    })
}

/// Applies one action. `out_observation_json` is optional as in
/// [`gl_env_reset`].
#[no_mangle]
pub extern "C" fn gl_env_step(
    env: *mut GlEnv,
    action: u32,
    out_result: *mut GlStepResult,
    out_observation_json: *mut *mut c_char,
) -> GlStatus {
    guard(|| {
        let o = out(out_result, "out_result")?;
        let step = env_mut(env)?
            .step(action)
            .map_err(|e| Failure(GlStatus::Env, e.to_string()))?;
        *o = GlStepResult {
            env_reward: step.env_reward,
            done: step.done,
            success: step.info.success,
        };
        if !out_observation_json.is_null() {
            *out(out_observation_json, "out_observation_json")? = observation_json(&step.observation)?;
        }
        Ok(())
    })
}

/// Writes the admissible action ids into `buf` (capacity `cap`) and their
/// count into `out_count`. If `cap` is too small nothing is written to `buf`,
/// `out_count` holds the required size and the status is `BufferTooSmall`.
///
/// # Safety
/// `buf` must point to `cap` writable values (it may be null when `cap` is 0).
#[no_mangle]
pub unsafe extern "C" fn gl_env_admissible(env: *mut GlEnv, buf: *mut u32, cap: usize, out_count: *mut usize) -> GlStatus {
    guard(|| {
        let count = out(out_count, "out_count")?;
        let actions = env_mut(env)?.admissible_actions();
        *count = actions.len();
        if actions.len() > cap {
            return Err(Failure(
                GlStatus::BufferTooSmall,
                format!("need room for {} actions, got {cap}", actions.len()),
            ));
        }
        if !actions.is_empty() {
            if buf.is_null() {
                return Err(Failure(GlStatus::NullPointer, "buf is null".into()));
            }
            std::slice::from_raw_parts_mut(buf, actions.len()).copy_from_slice(&actions);
        }
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn gl_env_num_actions(env: *mut GlEnv, out_n: *mut usize) -> GlStatus {
    guard(|| {
        *out(out_n, "out_n")? = env_mut(env)?.num_actions();
        Ok(())
    })
}

/// Task score in [0, 1] of the current episode.
#[no_mangle]
pub extern "C" fn gl_env_score(env: *mut GlEnv, out_score: *mut f64) -> GlStatus {
    guard(|| {
        *out(out_score, "out_score")? = env_mut(env)?.score();
        Ok(())
    })
}
