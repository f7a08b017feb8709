//! C ABI over the `lpvmpc` library.
//!
//! Every object is an opaque heap handle created by a `*_new`/`*_load`
//! function and released by the matching `*_free`. Every fallible call
//! returns an [`LpvmpcStatus`]; on failure the message is available from
//! [`lpvmpc_last_error`] on the same thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use lpvmpc::imitation::ImitationController;
use lpvmpc::mpc::{BoundSet, Controller, MpcConfig, MpcController, PredictionModel};
use lpvmpc::plant::{PlantState, Surrogate, SurrogateParams};
use lpvmpc::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpvmpcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Numerical = 5,
    Panic = 6,
}

/// Surrogate engine state after one cycle.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LpvmpcState {
    pub t_out: f64,
    pub p_man: f64,
    pub nox: f64,
    pub turbo_lag: f64,
    pub speed: f64,
}

/// One controller decision: inputs `[fq, soi, vgt]`, NOx slack, QP cost and
/// solver convergence flag (1 converged, 0 not).
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LpvmpcAction {
    pub u: [f64; 3],
    pub slack: f64,
    pub cost: f64,
    pub converged: i32,
}

/// Opaque surrogate plant.
pub struct LpvmpcPlant(Surrogate);
/// Opaque LPV or linear prediction model.
pub struct LpvmpcModel(PredictionModel);
/// Opaque model predictive controller.
pub struct LpvmpcMpc(MpcController);
/// Opaque imitation (recurrent network) controller.
pub struct LpvmpcImitation(ImitationController);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn classify(err: &Error) -> LpvmpcStatus {
    match err {
        Error::Io { .. } => LpvmpcStatus::Io,
        Error::Csv(_) | Error::Json(_) | Error::MissingColumn(_) | Error::NonNumeric { .. } => {
            LpvmpcStatus::Parse
        }
        Error::Singular(_)
        | Error::Divergence { .. }
        | Error::TrainingDiverged { .. }
        | Error::UnreachableTorque { .. } => LpvmpcStatus::Numerical,
        _ => LpvmpcStatus::InvalidArgument,
    }
}

/// Runs `f`, mapping errors and panics to status codes.
fn guard(f: impl FnOnce() -> Result<(), (LpvmpcStatus, String)>) -> LpvmpcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            LpvmpcStatus::Ok
        }
        Ok(Err((code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            LpvmpcStatus::Panic
        }
    }
}

fn lib(err: Error) -> (LpvmpcStatus, String) {
    (classify(&err), err.to_string())
}

fn null(what: &str) -> (LpvmpcStatus, String) {
    (LpvmpcStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (LpvmpcStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| (LpvmpcStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn read_json<T: for<'de> serde::Deserialize<'de>>(
    p: *const c_char,
    what: &str,
) -> Result<T, (LpvmpcStatus, String)> {
    let path = path_arg(p, what)?;
    let text = std::fs::read_to_string(&path).map_err(|source| lib(Error::Io { path, source }))?;
    serde_json::from_str(&text).map_err(|e| lib(e.into()))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (LpvmpcStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn in_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, (LpvmpcStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

fn to_c(s: &PlantState) -> LpvmpcState {
    LpvmpcState {
        t_out: s.t_out,
        p_man: s.p_man,
        nox: s.nox,
        turbo_lag: s.turbo_lag,
        speed: s.speed,
    }
}

fn from_c(s: &LpvmpcState) -> PlantState {
    PlantState {
        t_out: s.t_out,
        p_man: s.p_man,
        nox: s.nox,
        turbo_lag: s.turbo_lag,
        speed: s.speed,
    }
}

fn boxed<T>(out: &mut *mut T, v: T) {
    *out = Box::into_raw(Box::new(v));
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on this thread.
#[no_mangle]
pub extern "C" fn lpvmpc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lpvmpc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a plant. `params_json` and `bounds_json` are optional file paths
/// (null selects the built-in defaults).
///
/// # Safety
/// Pointer arguments must be null or valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lpvmpc_plant_new(
    params_json: *const c_char,
    bounds_json: *const c_char,
    out: *mut *mut LpvmpcPlant,
) -> LpvmpcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let params = if params_json.is_null() {
            SurrogateParams::default()
        } else {
            read_json(params_json, "params_json")?
        };
        let bounds: BoundSet = if bounds_json.is_null() {
            BoundSet::default()
        } else {
            read_json(bounds_json, "bounds_json")?
        };
        bounds.validate().map_err(lib)?;
        boxed(out, LpvmpcPlant(Surrogate { params, bounds }));
        Ok(())
    })
}

/// # Safety
/// `plant` must be null or a handle from [`lpvmpc_plant_new`], freed once.
#[no_mangle]
pub unsafe extern "C" fn lpvmpc_plant_free(plant: *mut LpvmpcPlant) {
    if !plant.is_null() {
        drop(Box::from_raw(plant));
    }
}

/// Steady state reached under a held input `u = [fq, soi, vgt]`.
///
/// # Safety
/// `plant` must be a live handle; `u` must point to 3 doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lpvmpc_plant_steady_state(
    plant: *const LpvmpcPlant,
    u: *const [f64; 3],
    speed: f64,
    out: *mut LpvmpcState,
) -> LpvmpcStatus {
    guard(|| {
        let plant = in_ref(plant, "plant")?;
        let u = *in_ref(u, "u")?;
        let out = out_ptr(out, "out")?;
        *out = to_c(&plant.0.steady_state(u, speed).map_err(lib)?);
        Ok(())
    })
}

/// Advances the plant one engine cycle from `state` under input `u`.
///
/// # Safety
/// `plant` must be a live handle; `state`, `u` valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lpvmpc_plant_step(
    plant: *const LpvmpcPlant,
    state: *const LpvmpcState,
    u: *const [f64; 3],
    speed: f64,
    out: *mut LpvmpcState,
) -> LpvmpcStatus {
    guard(|| {
        let plant = in_ref(plant, "plant")?;
        let state = from_c(in_ref(state, "state")?);
        let u = *in_ref(u, "u")?;
        let out = out_ptr(out, "out")?;
        *out = to_c(&plant.0.step(&state, u, speed).map_err(lib)?);
        Ok(())
    })
}

/// Loads an LPV or linear prediction model file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lpvmpc_model_load(
    path: *const c_char,
    out: *mut *mut LpvmpcModel,
) -> LpvmpcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = path_arg(path, "path")?;
        boxed(out, LpvmpcModel(PredictionModel::load(path).map_err(lib)?));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`lpvmpc_model_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn lpvmpc_model_free(model: *mut LpvmpcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Creates an MPC controller on a copy of `model`. `config_json` is an
/// optional configuration file (null selects the tuned defaults); `u0` is
/// the input applied before the first step.
///
/// # Safety
/// `model` must be a live handle; `u0` valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lpvmpc_mpc_new(
    model: *const LpvmpcModel,
    config_json: *const c_char,
    u0: *const [f64; 3],
    out: *mut *mut LpvmpcMpc,
) -> LpvmpcStatus {
    guard(|| {
        let model = in_ref(model, "model")?;
        let u0 = *in_ref(u0, "u0")?;
        let out = out_ptr(out, "out")?;
        let cfg = if config_json.is_null() {
            MpcConfig::tuned()
        } else {
            read_json(config_json, "config_json")?
        };
        let ctl = MpcController::new("mpc", model.0.clone(), cfg, u0).map_err(lib)?;
        boxed(out, LpvmpcMpc(ctl));
        Ok(())
    })
}

/// # Safety
/// `mpc` must be null or a handle from [`lpvmpc_mpc_new`], freed once.
#[no_mangle]
pub unsafe extern "C" fn lpvmpc_mpc_free(mpc: *mut LpvmpcMpc) {
    if !mpc.is_null() {
        drop(Box::from_raw(mpc));
    }
}

/// Clears controller memory; `u0` is the input applied before the next step.
///
/// # Safety
/// `mpc` must be a live handle; `u0` valid.
#[no_mangle]
pub unsafe extern "C" fn lpvmpc_mpc_reset(mpc: *mut LpvmpcMpc, u0: *const [f64; 3]) -> LpvmpcStatus {
    guard(|| {
        let mpc = out_ptr(mpc, "mpc")?;
        mpc.0.reset(*in_ref(u0, "u0")?);
        Ok(())
    })
}

/// One receding-horizon decision for the measured state and torque reference.
///
/// # Safety
/// `mpc` must be a live handle; `meas` valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lpvmpc_mpc_step(
    mpc: *mut LpvmpcMpc,
    meas: *const LpvmpcState,
    t_ref: f64,
    speed: f64,
    out: *mut LpvmpcAction,
) -> LpvmpcStatus {
    guard(|| {
        let mpc = out_ptr(mpc, "mpc")?;
        let meas = from_c(in_ref(meas, "meas")?);
        let out = out_ptr(out, "out")?;
        let a = mpc.0.step(&meas, t_ref, speed).map_err(lib)?;
        *out = LpvmpcAction {
            u: a.u,
            slack: a.slack,
            cost: a.cost,
            converged: a.converged as i32,
        };
        Ok(())
    })
}

/// Loads a trained imitation controller. `bounds_json` is optional (null
/// selects the default actuator limits).
///
/// # Safety
/// `path` must be a NUL-terminated string; `bounds_json` null or valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lpvmpc_imitation_load(
    path: *const c_char,
    bounds_json: *const c_char,
    out: *mut *mut LpvmpcImitation,
) -> LpvmpcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = path_arg(path, "path")?;
        let bounds: BoundSet = if bounds_json.is_null() {
            BoundSet::default()
        } else {
            read_json(bounds_json, "bounds_json")?
        };
        let ctl = ImitationController::load(path, bounds).map_err(lib)?;
        boxed(out, LpvmpcImitation(ctl));
        Ok(())
    })
}

/// # Safety
/// `ctl` must be null or a handle from [`lpvmpc_imitation_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn lpvmpc_imitation_free(ctl: *mut LpvmpcImitation) {
    if !ctl.is_null() {
        drop(Box::from_raw(ctl));
    }
}

/// Zeroes the recurrent state.
///
/// # Safety
/// `ctl` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lpvmpc_imitation_reset(ctl: *mut LpvmpcImitation) -> LpvmpcStatus {
    guard(|| {
        out_ptr(ctl, "ctl")?.0.reset([0.0; 3]);
        Ok(())
    })
}

/// One network decision for the measured state and torque reference.
/// `slack` and `cost` are zero and `converged` is 1.
///
/// # Safety
/// `ctl` must be a live handle; `meas` valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lpvmpc_imitation_step(
    ctl: *mut LpvmpcImitation,
    meas: *const LpvmpcState,
    t_ref: f64,
    speed: f64,
    out: *mut LpvmpcAction,
) -> LpvmpcStatus {
    guard(|| {
        let ctl = out_ptr(ctl, "ctl")?;
        let meas = from_c(in_ref(meas, "meas")?);
        let out = out_ptr(out, "out")?;
        let a = ctl.0.step(&meas, t_ref, speed).map_err(lib)?;
        *out = LpvmpcAction {
            u: a.u,
            slack: a.slack,
            cost: a.cost,
            converged: a.converged as i32,
        };
        Ok(())
    })
}
