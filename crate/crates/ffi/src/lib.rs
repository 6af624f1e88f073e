//! C ABI over the switchgame solvers.
//!
//! Problems and value surfaces are opaque handles owned by the caller and
//! released with the matching `*_free`. Every fallible call returns an
//! [`SgStatus`]; on failure [`sg_last_error`] describes the most recent error
//! of the calling thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use switchgame::bsde::{solve_penalized_bsde, RegressionBasis};
use switchgame::config::RunConfig;
use switchgame::field::ValueField;
use switchgame::lattice::{backward_induct, build_lattice};
use switchgame::model::{preflight, SwitchingProblem};
use switchgame::pde::{run_ladder, solve_maxmin, solve_minmax, LadderDirection};
use switchgame::sde::simulate_paths;
use switchgame::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    GridMismatch = 5,
    InvalidProblem = 6,
    /// A solver gave up: CFL, conditioning, non-convergence and the like.
    Numerical = 7,
    /// A game play was not admissible or the contact sets collided.
    Game = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgRoute {
    PdeMinmax = 0,
    PdeMaxmin = 1,
    LadderDec = 2,
    LadderInc = 3,
    Lattice = 4,
}

/// A resolved run configuration and the problem it describes.
pub struct SgProblem {
    config: RunConfig,
    problem: SwitchingProblem,
}

/// A value surface on a time-space grid.
pub struct SgField {
    field: ValueField,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    let c = CString::new(msg).expect("NUL bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SgStatus {
    match e {
        Error::InvalidArgument(_) => SgStatus::InvalidArgument,
        Error::Config(_) | Error::Parse { .. } => SgStatus::Config,
        Error::Io { .. } => SgStatus::Io,
        Error::GridMismatch { .. } => SgStatus::GridMismatch,
        Error::InvalidProblem(_) | Error::Evaluation { .. } => SgStatus::InvalidProblem,
        Error::NonAdmissible { .. } | Error::ContactConflict { .. } => SgStatus::Game,
        _ => SgStatus::Numerical,
    }
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), (SgStatus, String)>) -> SgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SgStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            SgStatus::Panic
        }
    }
}

fn lift<T>(r: switchgame::Result<T>) -> Result<T, (SgStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (SgStatus, String) {
    (SgStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (SgStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (SgStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, (SgStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), (SgStatus, String)> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

fn resolve(config: RunConfig) -> Result<*mut SgProblem, (SgStatus, String)> {
    let (config, problem) = lift(config.resolve())?;
    Ok(Box::into_raw(Box::new(SgProblem { config, problem })))
}

/// Loads a TOML run configuration from `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_problem_load(path: *const c_char, out: *mut *mut SgProblem) -> SgStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let config = lift(RunConfig::load(Path::new(path)))?;
        put(out, resolve(config)?, "out")
    })
}

/// Parses a TOML run configuration held in memory.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_problem_parse(text: *const c_char, out: *mut *mut SgProblem) -> SgStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        let config = lift(RunConfig::parse(text, "<memory>"))?;
        put(out, resolve(config)?, "out")
    })
}

/// # Safety
/// `problem` must come from this library and not be used afterwards. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn sg_problem_free(problem: *mut SgProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// Number of modes.
///
/// # Safety
/// `problem` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_problem_modes(problem: *const SgProblem, out: *mut usize) -> SgStatus {
    guard(|| put(out, handle(problem, "problem")?.problem.p(), "out"))
}

/// Runs the exact assumption checks on the configured grid. Returns
/// `SG_STATUS_INVALID_PROBLEM` with the report as the error message if any
/// fails.
///
/// # Safety
/// `problem` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sg_problem_preflight(problem: *const SgProblem) -> SgStatus {
    guard(|| {
        let h = handle(problem, "problem")?;
        let grid = h.config.grid_spec();
        let times = grid.time_axis(h.problem.horizon()).points();
        lift(preflight(&h.problem, &times, &grid.space_axis().points())).map(|_| ())
    })
}

/// Solves by `route` with the configured grid, lattice and ladder settings.
/// Ladder routes return the last rung.
///
/// # Safety
/// `problem` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_solve(problem: *const SgProblem, route: SgRoute, out: *mut *mut SgField) -> SgStatus {
    guard(|| {
        let SgProblem { config, problem } = handle(problem, "problem")?;
        let grid = config.grid_spec();
        let field = match route {
            SgRoute::PdeMinmax => lift(solve_minmax(problem, &grid))?,
            SgRoute::PdeMaxmin => lift(solve_maxmin(problem, &grid))?,
            SgRoute::LadderDec | SgRoute::LadderInc => {
                let dir = if route == SgRoute::LadderDec {
                    LadderDirection::Decreasing
                } else {
                    LadderDirection::Increasing
                };
                lift(run_ladder(problem, &grid, &config.ladder.schedule(), dir))?.limit
            }
            SgRoute::Lattice => {
                let steps = config.lattice.n_steps.unwrap_or(grid.n_steps);
                let lat = lift(build_lattice(
                    problem,
                    config.problem.t0,
                    config.problem.x0,
                    steps,
                    config.lattice.n_levels,
                ))?;
                lift(backward_induct(problem, &lat))?.field
            }
        };
        put(out, Box::into_raw(Box::new(SgField { field })), "out")
    })
}

/// Initial values `Y_0` of the penalized backward equations, one per mode,
/// with the configured Monte Carlo and penalty settings. `len` must equal the
/// number of modes.
///
/// # Safety
/// `problem` must be a live handle; `y0` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sg_bsde_y0(problem: *const SgProblem, y0: *mut f64, len: usize) -> SgStatus {
    guard(|| {
        let SgProblem { config, problem } = handle(problem, "problem")?;
        if y0.is_null() {
            return Err(null("y0"));
        }
        if len != problem.p() {
            return Err((
                SgStatus::InvalidArgument,
                format!("y0 holds {len} values, the problem has {} modes", problem.p()),
            ));
        }
        let mc = &config.monte_carlo;
        let (t0, x0) = (config.problem.t0, config.problem.x0);
        let bundle = lift(simulate_paths(problem, t0, &[x0], mc.n_steps, mc.n_paths, mc.seed))?;
        let basis = RegressionBasis {
            degree: config.bsde.degree,
        };
        let sol = lift(solve_penalized_bsde(
            problem,
            &bundle,
            config.bsde.m,
            config.bsde.n,
            basis,
        ))?;
        std::slice::from_raw_parts_mut(y0, len).copy_from_slice(&sol.y0());
        Ok(())
    })
}

/// Reads a field CSV and its metadata sidecar.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_field_read(path: *const c_char, out: *mut *mut SgField) -> SgStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let field = lift(ValueField::read(Path::new(path)))?;
        put(out, Box::into_raw(Box::new(SgField { field })), "out")
    })
}

/// Writes the field as CSV plus metadata sidecar.
///
/// # Safety
/// `field` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sg_field_write(field: *const SgField, path: *const c_char) -> SgStatus {
    guard(|| {
        let f = handle(field, "field")?;
        let path = str_arg(path, "path")?;
        lift(f.field.write(Path::new(path)))
    })
}

/// # Safety
/// `field` must come from this library and not be used afterwards. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn sg_field_free(field: *mut SgField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// Grid sizes. Any output pointer may be null.
///
/// # Safety
/// `field` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sg_field_shape(
    field: *const SgField,
    n_times: *mut usize,
    n_x: *mut usize,
    modes: *mut usize,
) -> SgStatus {
    guard(|| {
        let f = &handle(field, "field")?.field;
        for (p, v) in [(n_times, f.n_times()), (n_x, f.n_x()), (modes, f.p())] {
            if !p.is_null() {
                p.write(v);
            }
        }
        Ok(())
    })
}

/// Grid value of 0-based `mode` at time index `j` and space index `k`.
///
/// # Safety
/// `field` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_field_value(
    field: *const SgField,
    mode: usize,
    j: usize,
    k: usize,
    out: *mut f64,
) -> SgStatus {
    guard(|| {
        let f = &handle(field, "field")?.field;
        if mode >= f.p() || j >= f.n_times() || k >= f.n_x() {
            return Err((
                SgStatus::InvalidArgument,
                format!(
                    "index (mode {mode}, j {j}, k {k}) outside {} modes x {} times x {} points",
                    f.p(),
                    f.n_times(),
                    f.n_x()
                ),
            ));
        }
        put(out, f.value(mode, j, k), "out")
    })
}

/// Bilinear interpolation of 0-based `mode` at `(t, x)`, clamped to the grid.
///
/// # Safety
/// `field` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_field_interp(
    field: *const SgField,
    mode: usize,
    t: f64,
    x: f64,
    out: *mut f64,
) -> SgStatus {
    guard(|| {
        let f = &handle(field, "field")?.field;
        if mode >= f.p() || !t.is_finite() || !x.is_finite() {
            return Err((
                SgStatus::InvalidArgument,
                format!("bad query mode {mode} at ({t}, {x})"),
            ));
        }
        put(out, f.interp(mode, t, x), "out")
    })
}
