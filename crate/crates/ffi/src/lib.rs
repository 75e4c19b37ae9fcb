//! C interface to `gasnet`.
//!
//! Every entry point returns a [`GasnetStatus`]. On failure the message is
//! kept per thread and can be copied out with [`gasnet_last_error`]. Handles
//! are opaque and owned by the caller, who releases them with the matching
//! `*_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use gasnet::estimator::{self, EstimationData, EstimationOptions, Weights};
use gasnet::network::parse_network;
use gasnet::nondim::DEFAULT_LENGTH_SCALE;
use gasnet::profiles::BoundaryProfiles;
use gasnet::simulator::{Model, SimulationOptions};
use gasnet::timeseries::SeriesTable;
use gasnet::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GasnetStatus {
    Ok = 0,
    NullArgument = 1,
    /// Unreadable, malformed or inconsistent input.
    InvalidInput = 2,
    /// The estimator stopped before meeting its tolerance; the handle still
    /// holds the best iterate.
    NotConverged = 3,
    /// A solver failed without producing a usable result.
    SolverFailure = 4,
    /// The caller's buffer is too short.
    BufferTooSmall = 5,
    /// A bug inside the library.
    Internal = 6,
}

/// A network with its scaling and refinement.
pub struct GasnetModel(Model);

/// Junction densities from a periodic simulation.
pub struct GasnetSimulation {
    steps: usize,
    conservation_error: f64,
    densities: BTreeMap<String, Vec<f64>>,
}

/// Result of a friction estimate.
pub struct GasnetEstimate {
    converged: bool,
    iterations: usize,
    kkt_error: f64,
    friction: Vec<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(message: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = message);
}

fn fail(status: GasnetStatus, message: impl Into<String>) -> GasnetStatus {
    set_error(message.into());
    status
}

fn from_error(e: Error) -> GasnetStatus {
    let status = if e.is_input_error() {
        GasnetStatus::InvalidInput
    } else {
        GasnetStatus::SolverFailure
    };
    fail(status, e.to_string())
}

/// Runs `f`, turning panics into [`GasnetStatus::Internal`].
fn guard(f: impl FnOnce() -> GasnetStatus) -> GasnetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(GasnetStatus::Internal, format!("internal error: {message}"))
        }
    }
}

unsafe fn path_arg(ptr: *const c_char, name: &str) -> Result<PathBuf, GasnetStatus> {
    if ptr.is_null() {
        return Err(fail(GasnetStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| {
            fail(
                GasnetStatus::InvalidInput,
                format!("{name} is not valid UTF-8"),
            )
        })
}

fn steps_arg(steps: usize) -> Option<usize> {
    (steps > 0).then_some(steps)
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string and returns the full message length in bytes
/// (excluding the terminator). Passing a null `buf` only queries the length.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn gasnet_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = e.len().min(len - 1);
            std::ptr::copy_nonoverlapping(e.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gasnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a network JSON file and refines it to segments no longer than
/// `segment_length_km`.
///
/// # Safety
/// `network_path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gasnet_model_load(
    network_path: *const c_char,
    segment_length_km: f64,
    out: *mut *mut GasnetModel,
) -> GasnetStatus {
    guard(|| {
        if out.is_null() {
            return fail(GasnetStatus::NullArgument, "out is null");
        }
        let path = match path_arg(network_path, "network_path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        if !(segment_length_km > 0.0 && segment_length_km.is_finite()) {
            return fail(
                GasnetStatus::InvalidInput,
                format!("segment length must be positive, got {segment_length_km}"),
            );
        }
        let model = parse_network(&path)
            .and_then(|net| Model::new(net, segment_length_km * 1000.0, DEFAULT_LENGTH_SCALE));
        match model {
            Ok(m) => {
                *out = Box::into_raw(Box::new(GasnetModel(m)));
                GasnetStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `model` must be null or a handle from [`gasnet_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gasnet_model_free(model: *mut GasnetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of pipes, which is the length of a friction vector.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gasnet_model_num_pipes(model: *const GasnetModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.network.pipes().len())
}

/// Number of segments after refinement.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gasnet_model_num_segments(model: *const GasnetModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.refined.num_segments())
}

/// Simulates the periodic transient driven by a boundary profile CSV.
/// `steps == 0` keeps the file's time grid.
///
/// # Safety
/// `model` must be a live handle, `profiles_path` a NUL-terminated string
/// and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gasnet_simulate(
    model: *const GasnetModel,
    profiles_path: *const c_char,
    steps: usize,
    out: *mut *mut GasnetSimulation,
) -> GasnetStatus {
    guard(|| {
        let Some(model) = model.as_ref() else {
            return fail(GasnetStatus::NullArgument, "model is null");
        };
        if out.is_null() {
            return fail(GasnetStatus::NullArgument, "out is null");
        }
        let path = match path_arg(profiles_path, "profiles_path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let m = &model.0;
        let run = || -> gasnet::Result<GasnetSimulation> {
            let profiles = BoundaryProfiles::from_table(&m.network, &SeriesTable::read(&path)?)?;
            let sim = m.simulate(&profiles, steps_arg(steps), &SimulationOptions::default())?;
            Ok(GasnetSimulation {
                steps: sim.state.grid.steps,
                conservation_error: sim.conservation_error(),
                densities: m.junction_densities(&sim.state),
            })
        };
        match run() {
            Ok(s) => {
                *out = Box::into_raw(Box::new(s));
                GasnetStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `sim` must be null or a handle from [`gasnet_simulate`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gasnet_simulation_free(sim: *mut GasnetSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Number of time points per period.
///
/// # Safety
/// `sim` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gasnet_simulation_steps(sim: *const GasnetSimulation) -> usize {
    sim.as_ref().map_or(0, |s| s.steps)
}

/// Relative imbalance between supply, withdrawal and linepack change over
/// one period.
///
/// # Safety
/// `sim` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gasnet_simulation_conservation_error(sim: *const GasnetSimulation) -> f64 {
    sim.as_ref().map_or(f64::NAN, |s| s.conservation_error)
}

/// Copies the density series (kg/m³) of a non-slack junction into `buf`,
/// which must hold [`gasnet_simulation_steps`] values.
///
/// # Safety
/// `sim` must be a live handle, `junction` a NUL-terminated string and
/// `buf` valid for `len` values.
#[no_mangle]
pub unsafe extern "C" fn gasnet_simulation_density(
    sim: *const GasnetSimulation,
    junction: *const c_char,
    buf: *mut f64,
    len: usize,
) -> GasnetStatus {
    guard(|| {
        let Some(sim) = sim.as_ref() else {
            return fail(GasnetStatus::NullArgument, "simulation is null");
        };
        if junction.is_null() || buf.is_null() {
            return fail(GasnetStatus::NullArgument, "junction or buffer is null");
        }
        let id = CStr::from_ptr(junction).to_string_lossy();
        let Some(series) = sim.densities.get(id.as_ref()) else {
            return fail(
                GasnetStatus::InvalidInput,
                format!("no non-slack junction `{id}`"),
            );
        };
        copy_out(series, buf, len)
    })
}

unsafe fn copy_out(values: &[f64], buf: *mut f64, len: usize) -> GasnetStatus {
    if len < values.len() {
        return fail(
            GasnetStatus::BufferTooSmall,
            format!("buffer holds {len} values, need {}", values.len()),
        );
    }
    std::ptr::copy_nonoverlapping(values.as_ptr(), buf, values.len());
    GasnetStatus::Ok
}

/// Estimates state, withdrawals and pipe friction from a measurement CSV.
/// `steps == 0` keeps the file's time grid. Friction starts at
/// `friction_init` times the network's values.
///
/// Returns [`GasnetStatus::NotConverged`] with a valid handle when the
/// iteration cap is reached first.
///
/// # Safety
/// `model` must be a live handle, `measurements_path` a NUL-terminated
/// string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gasnet_estimate(
    model: *const GasnetModel,
    measurements_path: *const c_char,
    steps: usize,
    friction_init: f64,
    max_iterations: usize,
    out: *mut *mut GasnetEstimate,
) -> GasnetStatus {
    guard(|| {
        let Some(model) = model.as_ref() else {
            return fail(GasnetStatus::NullArgument, "model is null");
        };
        if out.is_null() {
            return fail(GasnetStatus::NullArgument, "out is null");
        }
        let path = match path_arg(measurements_path, "measurements_path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let m = &model.0;
        let run = || -> gasnet::Result<GasnetEstimate> {
            let data = EstimationData::from_table(&m.network, &SeriesTable::read(&path)?)?;
            let options = EstimationOptions {
                max_iterations,
                friction_init_factor: friction_init,
                ..EstimationOptions::default()
            };
            options.validate()?;
            let est =
                estimator::estimate(m, &data, &Weights::default(), steps_arg(steps), &options)?;
            let sol = est.solution;
            Ok(GasnetEstimate {
                converged: sol.converged,
                iterations: sol.iterations,
                kkt_error: sol.kkt_error,
                friction: sol.friction,
            })
        };
        match run() {
            Ok(est) => {
                let status = if est.converged {
                    GasnetStatus::Ok
                } else {
                    fail(
                        GasnetStatus::NotConverged,
                        format!(
                            "no convergence in {} iterations (KKT error {:.3e})",
                            est.iterations, est.kkt_error
                        ),
                    )
                };
                *out = Box::into_raw(Box::new(est));
                status
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `est` must be null or a handle from [`gasnet_estimate`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gasnet_estimate_free(est: *mut GasnetEstimate) {
    if !est.is_null() {
        drop(Box::from_raw(est));
    }
}

/// Interior-point iterations used.
///
/// # Safety
/// `est` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gasnet_estimate_iterations(est: *const GasnetEstimate) -> usize {
    est.as_ref().map_or(0, |e| e.iterations)
}

/// Copies the estimated friction factors, in network pipe order, into
/// `buf`, which must hold [`gasnet_model_num_pipes`] values.
///
/// # Safety
/// `est` must be a live handle and `buf` valid for `len` values.
#[no_mangle]
pub unsafe extern "C" fn gasnet_estimate_friction(
    est: *const GasnetEstimate,
    buf: *mut f64,
    len: usize,
) -> GasnetStatus {
    guard(|| {
        let Some(est) = est.as_ref() else {
            return fail(GasnetStatus::NullArgument, "estimate is null");
        };
        if buf.is_null() {
            return fail(GasnetStatus::NullArgument, "buffer is null");
        }
        copy_out(&est.friction, buf, len)
    })
}
