//! C ABI over the planner: codebooks, policy checkpoints, scenes and
//! scoring behind opaque handles.
//!
//! Every fallible call returns an [`FpStatus`]; on failure the message is
//! kept per thread and can be copied out with [`fp_last_error`]. Handles are
//! created by `*_new`/`*_load`/`*_generate` and released with the matching
//! `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::path::Path;
use std::ptr;

use flowplan::codebook::{CodebookSpec, TokenId};
use flowplan::error::Error;
use flowplan::net::{Command, ContextEncoding, EGO_FIELDS, PolicyParams};
use flowplan::path::CoordinateSpace;
use flowplan::sampler::{sample, SamplerConfig};
use flowplan::sim::{generate_scene, score_waypoints, Difficulty, RewardWeights, Scene};
use flowplan::TRAJECTORY_DIMS;

/// Number of waypoints in a trajectory; waypoint buffers hold twice this
/// many doubles, interleaved `x, y`.
pub const FP_WAYPOINTS: usize = 8;
pub const FP_TOKENS: usize = 16;

const _: () = assert!(FP_TOKENS == TRAJECTORY_DIMS && FP_WAYPOINTS * 2 == FP_TOKENS);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    OutOfRange = 3,
    Io = 4,
    Checkpoint = 5,
    Runtime = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FpReward {
    pub nc: f64,
    pub dac: f64,
    pub ttc: f64,
    pub comfort: f64,
    pub ep: f64,
    pub reward: f64,
    pub pdms: f64,
}

/// Opaque codebook handle.
pub struct FpCodebook {
    spec: CodebookSpec,
}

/// Opaque trained policy handle.
pub struct FpPolicy {
    params: PolicyParams,
    space: CoordinateSpace,
}

/// Opaque scene handle.
pub struct FpScene {
    scene: Scene,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: FpStatus, msg: impl Into<String>) -> FpStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn from_error(e: Error) -> FpStatus {
    let status = match &e {
        Error::OutOfRange { .. } | Error::InvalidToken { .. } => FpStatus::OutOfRange,
        Error::Io { .. } => FpStatus::Io,
        Error::Checkpoint { .. } => FpStatus::Checkpoint,
        e if e.is_validation() => FpStatus::InvalidArgument,
        _ => FpStatus::Runtime,
    };
    fail(status, e.to_string())
}

macro_rules! deref {
    ($p:expr) => {
        match unsafe { $p.as_ref() } {
            Some(v) => v,
            None => return fail(FpStatus::NullPointer, concat!(stringify!($p), " is null")),
        }
    };
}

macro_rules! out {
    ($p:expr) => {
        match unsafe { $p.as_mut() } {
            Some(v) => v,
            None => return fail(FpStatus::NullPointer, concat!(stringify!($p), " is null")),
        }
    };
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn fp_last_error(buf: *mut c_char, len: usize) -> usize {
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

/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fp_codebook_new(min: f64, max: f64, resolution: f64, out: *mut *mut FpCodebook) -> FpStatus {
    let out = out!(out);
    match CodebookSpec::new(min, max, resolution) {
        Ok(spec) => {
            *out = Box::into_raw(Box::new(FpCodebook { spec }));
            FpStatus::Ok
        }
        Err(e) => from_error(e),
    }
}

/// # Safety
/// `cb` must be null or a handle from [`fp_codebook_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fp_codebook_free(cb: *mut FpCodebook) {
    if !cb.is_null() {
        drop(Box::from_raw(cb));
    }
}

/// Number of tokens, or 0 for a null handle.
///
/// # Safety
/// `cb` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fp_codebook_size(cb: *const FpCodebook) -> usize {
    cb.as_ref().map_or(0, |c| c.spec.size())
}

/// Nearest token to `value`. With `strict` nonzero, values outside the
/// codebook range fail with `OutOfRange` instead of clamping.
///
/// # Safety
/// `cb` must be null or a live handle; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn fp_codebook_quantize(cb: *const FpCodebook, value: f64, strict: bool, out: *mut u32) -> FpStatus {
    let cb = deref!(cb);
    let out = out!(out);
    match cb.spec.quantize(value, strict) {
        Ok(id) => {
            *out = id.0;
            FpStatus::Ok
        }
        Err(e) => from_error(e),
    }
}

/// # Safety
/// `cb` must be null or a live handle; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn fp_codebook_dequantize(cb: *const FpCodebook, id: u32, out: *mut f64) -> FpStatus {
    let cb = deref!(cb);
    let out = out!(out);
    match cb.spec.dequantize(TokenId(id)) {
        Ok(v) => {
            *out = v;
            FpStatus::Ok
        }
        Err(e) => from_error(e),
    }
}

/// Loads a `WAMFNET1` policy checkpoint from a NUL-terminated UTF-8 path.
///
/// # Safety
/// `path` must be null or a valid C string; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn fp_policy_load(path: *const c_char, out: *mut *mut FpPolicy) -> FpStatus {
    if path.is_null() {
        return fail(FpStatus::NullPointer, "path is null");
    }
    let out = out!(out);
    let Ok(path) = CStr::from_ptr(path).to_str() else {
        return fail(FpStatus::InvalidArgument, "path is not UTF-8");
    };
    let loaded = PolicyParams::load(Path::new(path))
        .and_then(|params| Ok((CoordinateSpace::trajectory(params.spec)?, params)));
    match loaded {
        Ok((space, params)) => {
            *out = Box::into_raw(Box::new(FpPolicy { params, space }));
            FpStatus::Ok
        }
        Err(e) => from_error(e),
    }
}

/// # Safety
/// `p` must be null or a handle from [`fp_policy_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fp_policy_free(p: *mut FpPolicy) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Samples a trajectory for command `command` (0 left, 1 straight, 2 right)
/// and ego state `ego = [x, y, heading, v, a]`. Writes `FP_TOKENS` token ids
/// to `tokens` and `2 * FP_WAYPOINTS` doubles to `waypoints`; either output
/// may be null.
///
/// # Safety
/// `ego` must point to 5 doubles; non-null outputs must hold the sizes above.
#[no_mangle]
pub unsafe extern "C" fn fp_policy_sample(
    p: *const FpPolicy,
    command: u32,
    ego: *const f64,
    steps: u32,
    seed: u64,
    tokens: *mut u32,
    waypoints: *mut f64,
) -> FpStatus {
    let p = deref!(p);
    if ego.is_null() {
        return fail(FpStatus::NullPointer, "ego is null");
    }
    let Some(&command) = Command::ALL.get(command as usize) else {
        return fail(FpStatus::InvalidArgument, format!("command {command} is not 0, 1 or 2"));
    };
    let mut state = [0.0; EGO_FIELDS];
    state.copy_from_slice(std::slice::from_raw_parts(ego, EGO_FIELDS));
    let cfg = SamplerConfig::new(steps as usize, seed);
    let result = ContextEncoding::quantize(command, state, &p.params.spec)
        .and_then(|ctx| {
            cfg.validate()?;
            sample(&ctx, &p.params, &p.space, &cfg)
        });
    match result {
        Ok((x, wps)) => {
            if !tokens.is_null() {
                for (i, t) in x.0.iter().enumerate() {
                    *tokens.add(i) = t.0;
                }
            }
            if !waypoints.is_null() {
                for (i, w) in wps.iter().enumerate() {
                    *waypoints.add(2 * i) = w[0];
                    *waypoints.add(2 * i + 1) = w[1];
                }
            }
            FpStatus::Ok
        }
        Err(e) => from_error(e),
    }
}

/// Deterministic generated scene; `difficulty` is 0 easy, 1 medium, 2 hard.
///
/// # Safety
/// `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn fp_scene_generate(seed: u64, difficulty: u32, out: *mut *mut FpScene) -> FpStatus {
    let out = out!(out);
    let Some(&d) = Difficulty::ALL.get(difficulty as usize) else {
        return fail(FpStatus::InvalidArgument, format!("difficulty {difficulty} is not 0, 1 or 2"));
    };
    *out = Box::into_raw(Box::new(FpScene {
        scene: generate_scene(seed, d),
    }));
    FpStatus::Ok
}

/// # Safety
/// `s` must be null or a handle from [`fp_scene_generate`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fp_scene_free(s: *mut FpScene) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Copies the scene's ego state `[x, y, heading, v, a]` and navigation
/// command.
///
/// # Safety
/// `ego` must be null or hold 5 doubles; `command` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn fp_scene_ego(s: *const FpScene, ego: *mut f64, command: *mut u32) -> FpStatus {
    let s = deref!(s);
    let e = &s.scene.ego0;
    if !ego.is_null() {
        for (i, v) in [e.x, e.y, e.heading, e.v, e.a].into_iter().enumerate() {
            *ego.add(i) = v;
        }
    }
    if !command.is_null() {
        *command = s.scene.command.index() as u32;
    }
    FpStatus::Ok
}

/// Copies the expert trajectory as `2 * FP_WAYPOINTS` interleaved doubles.
///
/// # Safety
/// `waypoints` must be null or hold `2 * FP_WAYPOINTS` doubles.
#[no_mangle]
pub unsafe extern "C" fn fp_scene_expert(s: *const FpScene, waypoints: *mut f64) -> FpStatus {
    let s = deref!(s);
    if waypoints.is_null() {
        return fail(FpStatus::NullPointer, "waypoints is null");
    }
    for (i, w) in s.scene.expert.iter().enumerate() {
        *waypoints.add(2 * i) = w[0];
        *waypoints.add(2 * i + 1) = w[1];
    }
    FpStatus::Ok
}

/// Rolls out and scores `2 * FP_WAYPOINTS` interleaved waypoint
/// coordinates with reward weights `(w_ep, w_ttc, w_comfort)`.
///
/// # Safety
/// `waypoints` must hold `2 * FP_WAYPOINTS` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fp_scene_score(
    s: *const FpScene,
    waypoints: *const f64,
    w_ep: f64,
    w_ttc: f64,
    w_comfort: f64,
    out: *mut FpReward,
) -> FpStatus {
    let s = deref!(s);
    if waypoints.is_null() {
        return fail(FpStatus::NullPointer, "waypoints is null");
    }
    let out = out!(out);
    let flat = std::slice::from_raw_parts(waypoints, 2 * FP_WAYPOINTS);
    let wps: Vec<[f64; 2]> = flat.chunks(2).map(|c| [c[0], c[1]]).collect();
    let weights = RewardWeights {
        ep: w_ep,
        ttc: w_ttc,
        comfort: w_comfort,
    };
    match weights.validate().and_then(|_| score_waypoints(&s.scene, &wps, &weights)) {
        Ok(b) => {
            *out = FpReward {
                nc: b.nc,
                dac: b.dac,
                ttc: b.ttc,
                comfort: b.comfort,
                ep: b.ep,
                reward: b.reward,
                pdms: b.pdms,
            };
            FpStatus::Ok
        }
        Err(e) => from_error(e),
    }
}
