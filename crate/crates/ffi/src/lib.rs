//! C ABI over `fic_teleop`.
//!
//! Objects cross the boundary as opaque handles created by `*_new` and
//! released by `*_free` (or `fic_sim_finish`). Every fallible call returns a
//! [`FicStatus`]; on failure a message is available from
//! [`fic_last_error_message`] on the same thread. Panics never unwind into C.

use fic_teleop::comms::ChannelSet;
use fic_teleop::experiment_log::ExperimentLog;
use fic_teleop::fic::{
    fic_wrench, AxisErrorState, AxisFicState, FicParams, Phase, DEFAULT_VEL_EPSILON,
};
use fic_teleop::operator::OperatorOutput;
use fic_teleop::simulation::{SimConfig, SimError, Simulation};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FicStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    /// The simulation hit a non-finite state; only `fic_sim_finish` remains useful.
    Aborted = 4,
    Io = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Opaque FIC controller of one axis.
pub struct FicAxis {
    params: FicParams,
    state: AxisFicState,
}

/// Opaque simulation session.
pub struct FicSimulation {
    sim: Simulation,
    aborted: Option<(String, ExperimentLog)>,
}

/// Result of one axis update.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FicAxisOutput {
    pub force: f64,
    pub stiffness_force: f64,
    pub damping_force: f64,
    /// 0 while the error grows, 1 while it converges.
    pub phase: u8,
    pub x_max_err: f64,
    pub stored_energy: f64,
}

/// Operator input applied from the next tick on.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FicCommand {
    pub master_err: [f64; 2],
    pub master_held: bool,
    pub gripper_held: bool,
    pub external_impulse: [f64; 2],
    pub pose_nudge: [f64; 2],
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

type Failure = (FicStatus, String);

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FicStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FicStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            FicStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    (FicStatus::NullPointer, format!("{what} is null"))
}

unsafe fn handle<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (FicStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn sim_failure(e: SimError) -> Failure {
    match e {
        SimError::Abort { .. } => (FicStatus::Aborted, e.to_string()),
        SimError::Log(_) => (FicStatus::Io, e.to_string()),
        SimError::Config(_) => (FicStatus::InvalidConfig, e.to_string()),
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fic_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fic_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Creates an axis controller from its four tuning values.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn fic_axis_new(
    w_max: f64,
    x_b: f64,
    k_0: f64,
    d: f64,
    out: *mut *mut FicAxis,
) -> FicStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let params = FicParams::calibrate(w_max, x_b, k_0, d)
            .map_err(|e| (FicStatus::InvalidArgument, e.to_string()))?;
        let axis = Box::new(FicAxis {
            params,
            state: AxisFicState::default(),
        });
        *out = Box::into_raw(axis);
        Ok(())
    })
}

/// Releases an axis. NULL is ignored.
///
/// # Safety
/// `axis` must come from `fic_axis_new` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn fic_axis_free(axis: *mut FicAxis) {
    if !axis.is_null() {
        drop(Box::from_raw(axis));
    }
}

/// Forgets the hysteresis memory.
///
/// # Safety
/// `axis` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fic_axis_reset(axis: *mut FicAxis) -> FicStatus {
    guard(|| {
        handle(axis, "axis")?.state = AxisFicState::default();
        Ok(())
    })
}

/// One control update with error `err = x_ref - x` and its rate `vel`.
///
/// # Safety
/// `axis` must be a live handle and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn fic_axis_step(
    axis: *mut FicAxis,
    err: f64,
    vel: f64,
    out: *mut FicAxisOutput,
) -> FicStatus {
    guard(|| {
        let axis = handle(axis, "axis")?;
        let out = handle(out, "out")?;
        if !(err.is_finite() && vel.is_finite()) {
            return Err((
                FicStatus::InvalidArgument,
                "error and rate must be finite".into(),
            ));
        }
        let (o, next) = fic_wrench(
            AxisErrorState::new(err, vel),
            &axis.state,
            &axis.params,
            DEFAULT_VEL_EPSILON,
        );
        axis.state = next;
        *out = FicAxisOutput {
            force: o.force,
            stiffness_force: o.stiffness_force,
            damping_force: o.damping_force,
            phase: match o.phase {
                Phase::Divergence => 0,
                Phase::Convergence => 1,
            },
            x_max_err: next.x_max_err,
            stored_energy: next.stored_energy,
        };
        Ok(())
    })
}

/// Largest stiffness force the divergence profile can produce.
///
/// # Safety
/// `axis` must be a live handle and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn fic_axis_force_bound(axis: *mut FicAxis, out: *mut f64) -> FicStatus {
    guard(|| {
        let bound = handle(axis, "axis")?.params.force_bound();
        *handle(out, "out")? = bound;
        Ok(())
    })
}

/// Creates a simulation from a JSON configuration, or the nominal one when
/// `config_json` is NULL.
///
/// # Safety
/// `config_json` must be NULL or a NUL-terminated string; `out` must be
/// valid for one write.
#[no_mangle]
pub unsafe extern "C" fn fic_sim_new(
    config_json: *const c_char,
    out: *mut *mut FicSimulation,
) -> FicStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = if config_json.is_null() {
            SimConfig::nominal()
        } else {
            SimConfig::from_json(c_str(config_json, "config_json")?).map_err(sim_failure)?
        };
        let sim = Simulation::new(cfg).map_err(sim_failure)?;
        *out = Box::into_raw(Box::new(FicSimulation { sim, aborted: None }));
        Ok(())
    })
}

/// Releases a simulation without writing its log. NULL is ignored.
///
/// # Safety
/// `sim` must come from `fic_sim_new` and not have been released.
#[no_mangle]
pub unsafe extern "C" fn fic_sim_free(sim: *mut FicSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Sets the operator input of an idle-scenario simulation.
///
/// # Safety
/// `sim` must be a live handle and `cmd` valid for one read.
#[no_mangle]
pub unsafe extern "C" fn fic_sim_set_command(
    sim: *mut FicSimulation,
    cmd: *const FicCommand,
) -> FicStatus {
    guard(|| {
        let s = handle(sim, "sim")?;
        let c = cmd.as_ref().ok_or_else(|| null("cmd"))?;
        let values = c
            .master_err
            .iter()
            .chain(&c.external_impulse)
            .chain(&c.pose_nudge);
        if !values.clone().all(|v| v.is_finite()) {
            return Err((FicStatus::InvalidArgument, "command must be finite".into()));
        }
        s.sim.operator_mut().set_live_command(OperatorOutput {
            master_err: c.master_err,
            master_held: c.master_held,
            gripper_held: c.gripper_held,
            external_impulse: c.external_impulse,
            pose_nudge: c.pose_nudge,
        });
        Ok(())
    })
}

/// Applies one delay (s) and sample rate (Hz) to all three streams.
///
/// # Safety
/// `sim` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fic_sim_set_channels(
    sim: *mut FicSimulation,
    delay: f64,
    sample_rate: f64,
) -> FicStatus {
    guard(|| {
        let s = handle(sim, "sim")?;
        s.sim
            .set_channels(ChannelSet::uniform(delay, sample_rate))
            .map_err(|e| (FicStatus::InvalidArgument, e.to_string()))
    })
}

/// Advances up to `ticks` steps, stopping early at the end of the run.
/// `finished` (optional) reports whether the run is over.
///
/// # Safety
/// `sim` must be a live handle; `finished` must be NULL or valid for one write.
#[no_mangle]
pub unsafe extern "C" fn fic_sim_step(
    sim: *mut FicSimulation,
    ticks: u64,
    finished: *mut bool,
) -> FicStatus {
    guard(|| {
        let s = handle(sim, "sim")?;
        if let Some((reason, _)) = &s.aborted {
            return Err((FicStatus::Aborted, reason.clone()));
        }
        for _ in 0..ticks {
            if s.sim.finished() {
                break;
            }
            match s.sim.step() {
                Ok(_) => {}
                Err(SimError::Abort { t, reason, partial }) => {
                    let msg = format!("aborted at t = {t} s: {reason}");
                    s.aborted = Some((msg.clone(), *partial));
                    return Err((FicStatus::Aborted, msg));
                }
                Err(e) => return Err(sim_failure(e)),
            }
        }
        if let Some(f) = finished.as_mut() {
            *f = s.sim.finished();
        }
        Ok(())
    })
}

/// Simulated time (s).
///
/// # Safety
/// `sim` must be a live handle and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn fic_sim_time(sim: *mut FicSimulation, out: *mut f64) -> FicStatus {
    guard(|| {
        let t = handle(sim, "sim")?.sim.time();
        *handle(out, "out")? = t;
        Ok(())
    })
}

/// Writes the current state as NUL-terminated JSON into `buf`. `needed`
/// receives the required size including the terminator; pass `cap = 0` to
/// query it.
///
/// # Safety
/// `sim` must be a live handle, `buf` valid for `cap` bytes (or NULL when
/// `cap` is 0) and `needed` NULL or valid for one write.
#[no_mangle]
pub unsafe extern "C" fn fic_sim_snapshot_json(
    sim: *mut FicSimulation,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> FicStatus {
    guard(|| {
        let s = handle(sim, "sim")?;
        let json = serde_json::to_string(&s.sim.snapshot()).expect("snapshot serializes");
        let size = json.len() + 1;
        if let Some(n) = needed.as_mut() {
            *n = size;
        }
        if cap < size {
            return Err((
                FicStatus::BufferTooSmall,
                format!("snapshot needs {size} bytes"),
            ));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        std::ptr::copy_nonoverlapping(json.as_ptr().cast::<c_char>(), buf, json.len());
        *buf.add(json.len()) = 0;
        Ok(())
    })
}

/// Writes the log to `path` (skipped when NULL) and releases the handle,
/// whatever the outcome. An aborted run writes its partial log and returns
/// `FIC_STATUS_ABORTED`.
///
/// # Safety
/// `sim` must be a live handle; it is invalid after this call. `path` must be
/// NULL or a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fic_sim_finish(sim: *mut FicSimulation, path: *const c_char) -> FicStatus {
    guard(|| {
        if sim.is_null() {
            return Err(null("sim"));
        }
        let s = *Box::from_raw(sim);
        let path = if path.is_null() {
            None
        } else {
            Some(c_str(path, "path")?)
        };
        let (log, abort) = match s.aborted {
            Some((msg, partial)) => (partial, Some(msg)),
            None => (s.sim.finish().map_err(sim_failure)?, None),
        };
        if let Some(p) = path {
            log.write_to(Path::new(p))
                .map_err(|e| (FicStatus::Io, e.to_string()))?;
        }
        match abort {
            Some(msg) => Err((FicStatus::Aborted, msg)),
            None => Ok(()),
        }
    })
}
