//! C ABI for `twoscale`.
//!
//! Every fallible function returns a [`TsStatus`]; on failure the message is
//! available from [`ts_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use twoscale::bounds::{self, BoundsError, ConstantLedger, Truncation};
use twoscale::engine::{self, Mode, NoiseGenerator, NoiseKind, ProjectionRadii, RunConfig};
use twoscale::model::SpecJson;
use twoscale::spectral::SpectralConstants;
use twoscale::{LinearTtsSpec, Matrix, NoiseBounds, Radii, StepsizeSchedule, Vector};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Model = 3,
    Spectral = 4,
    Bounds = 5,
    Engine = 6,
    OutOfRange = 7,
    Panic = 8,
}

/// Problem instance handle.
pub struct TsSpec {
    inner: LinearTtsSpec,
}

/// Recorded trajectory handle.
pub struct TsTrajectory {
    inner: engine::Trajectory,
}

/// Inputs shared by the bound evaluators.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TsBoundsInput {
    pub alpha: f64,
    pub beta: f64,
    pub r1in: f64,
    pub r2in: f64,
    pub r2out: f64,
    pub m1: f64,
    pub m2: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub n0: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TsLockInBound {
    pub bound: f64,
    pub vacuous: bool,
    pub noiseless: bool,
    pub n0_meets_threshold: bool,
    /// Smallest admissible start index.
    pub big_n0: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TsSimulation {
    pub alpha: f64,
    pub beta: f64,
    /// Sphere-noise scales; zero for deterministic runs.
    pub noise_c1: f64,
    pub noise_c2: f64,
    pub seed: u64,
    pub trial: u64,
    pub n_start: usize,
    pub n_end: usize,
    pub stride: usize,
    /// Project onto balls of radius `r1in/2`, `r2in/2` at powers of two.
    pub projected: bool,
    pub r1in: f64,
    pub r2in: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: TsStatus, msg: impl Into<String>) -> TsStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> TsStatus) -> TsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(TsStatus::Panic, "internal panic"),
    }
}

fn bounds_status(e: BoundsError) -> TsStatus {
    let status = match e {
        BoundsError::EpsilonOutOfRange(_) | BoundsError::Domain(_) => TsStatus::InvalidArgument,
        BoundsError::Model(_) => TsStatus::Model,
        _ => TsStatus::Bounds,
    };
    fail(status, e.to_string())
}

/// Message of the last failure on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ts_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ts_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

unsafe fn read_vec(p: *const f64, d: usize) -> Vector {
    Vector::from_column_slice(std::slice::from_raw_parts(p, d))
}

unsafe fn read_mat(p: *const f64, d: usize) -> Matrix {
    Matrix::from_row_slice(d, d, std::slice::from_raw_parts(p, d * d))
}

/// Builds a spec from row-major `d×d` matrices and length-`d` vectors.
///
/// # Safety
/// Every pointer must be valid for the stated number of reads and `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_spec_new(
    d: usize,
    v1: *const f64,
    gamma1: *const f64,
    w1: *const f64,
    v2: *const f64,
    gamma2: *const f64,
    w2: *const f64,
    out: *mut *mut TsSpec,
) -> TsStatus {
    guard(|| {
        if [v1, gamma1, w1, v2, gamma2, w2].iter().any(|p| p.is_null()) || out.is_null() {
            return fail(TsStatus::NullPointer, "null argument");
        }
        if d == 0 {
            return fail(TsStatus::InvalidArgument, "d must be positive");
        }
        let spec = LinearTtsSpec::new(
            read_vec(v1, d),
            read_mat(gamma1, d),
            read_mat(w1, d),
            read_vec(v2, d),
            read_mat(gamma2, d),
            read_mat(w2, d),
        );
        match spec {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(TsSpec { inner }));
                TsStatus::Ok
            }
            Err(e) => fail(TsStatus::Model, e.to_string()),
        }
    })
}

/// Builds a spec from its JSON form.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ts_spec_from_json(json: *const c_char, out: *mut *mut TsSpec) -> TsStatus {
    guard(|| {
        if json.is_null() || out.is_null() {
            return fail(TsStatus::NullPointer, "null argument");
        }
        let text = match CStr::from_ptr(json).to_str() {
            Ok(t) => t,
            Err(_) => return fail(TsStatus::InvalidArgument, "spec JSON is not UTF-8"),
        };
        let parsed: SpecJson = match serde_json::from_str(text) {
            Ok(p) => p,
            Err(e) => return fail(TsStatus::InvalidArgument, e.to_string()),
        };
        match parsed.build() {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(TsSpec { inner }));
                TsStatus::Ok
            }
            Err(e) => fail(TsStatus::Model, e.to_string()),
        }
    })
}

/// # Safety
/// `spec` must come from a `ts_spec_*` constructor and not be used again.
#[no_mangle]
pub unsafe extern "C" fn ts_spec_free(spec: *mut TsSpec) {
    if !spec.is_null() {
        drop(Box::from_raw(spec));
    }
}

/// Dimension of the spec, or 0 for a null handle.
///
/// # Safety
/// `spec` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ts_spec_dim(spec: *const TsSpec) -> usize {
    spec.as_ref().map_or(0, |s| s.inner.dim())
}

/// Copies `θ*` into `out[0..len]`; `len` must equal the dimension.
///
/// # Safety
/// `spec` must be live and `out` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ts_spec_theta_star(
    spec: *const TsSpec,
    out: *mut f64,
    len: usize,
) -> TsStatus {
    guard(|| {
        let Some(spec) = spec.as_ref() else {
            return fail(TsStatus::NullPointer, "null spec");
        };
        if out.is_null() {
            return fail(TsStatus::NullPointer, "null output buffer");
        }
        let star = spec.inner.theta_star();
        if len != star.len() {
            return fail(
                TsStatus::InvalidArgument,
                format!("buffer length {len} does not match dimension {}", star.len()),
            );
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(star.as_slice());
        TsStatus::Ok
    })
}

fn ledger_for(spec: &LinearTtsSpec, input: &TsBoundsInput) -> Result<ConstantLedger, TsStatus> {
    let spectral = SpectralConstants::with_defaults(spec)
        .map_err(|e| fail(TsStatus::Spectral, e.to_string()))?;
    let radii = Radii::new(input.r1in, input.r2in, input.r2out)
        .map_err(|e| fail(TsStatus::InvalidArgument, e.to_string()))?;
    let noise = NoiseBounds::new(input.m1, input.m2)
        .map_err(|e| fail(TsStatus::InvalidArgument, e.to_string()))?;
    ConstantLedger::build(spec, &spectral, &radii, &noise).map_err(bounds_status)
}

/// Lock-in probability bound for the polynomial schedule
/// `((n+1)^-alpha, (n+1)^-beta)`, with the closed-form tail.
///
/// # Safety
/// `spec` must be live; `input` readable; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ts_lockin_bound(
    spec: *const TsSpec,
    input: *const TsBoundsInput,
    out: *mut TsLockInBound,
) -> TsStatus {
    guard(|| {
        let (Some(spec), Some(input)) = (spec.as_ref(), input.as_ref()) else {
            return fail(TsStatus::NullPointer, "null argument");
        };
        if out.is_null() {
            return fail(TsStatus::NullPointer, "null output");
        }
        let schedule = match StepsizeSchedule::polynomial(input.alpha, input.beta) {
            Ok(s) => s,
            Err(e) => return fail(TsStatus::InvalidArgument, e.to_string()),
        };
        let ledger = match ledger_for(&spec.inner, input) {
            Ok(l) => l,
            Err(s) => return s,
        };
        let thresholds = match bounds::threshold_n0(&ledger, &schedule, input.eps1, input.eps2) {
            Ok(t) => t,
            Err(e) => return bounds_status(e),
        };
        let report = bounds::theorem1_bound(
            &ledger,
            &schedule,
            input.n0,
            input.eps1,
            input.eps2,
            Truncation::ClosedFormTail {
                direct_terms: bounds::DEFAULT_DIRECT_TERMS,
            },
        );
        match report {
            Ok(r) => {
                *out = TsLockInBound {
                    bound: r.bound,
                    vacuous: r.vacuous,
                    noiseless: r.noiseless,
                    n0_meets_threshold: r.n0_meets_threshold,
                    big_n0: thresholds.n0,
                };
                TsStatus::Ok
            }
            Err(e) => bounds_status(e),
        }
    })
}

/// Runs one trajectory from `(theta0, w0)`.
///
/// # Safety
/// `spec` must be live; `sim` readable; `theta0`, `w0` readable for the
/// spec dimension; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ts_simulate(
    spec: *const TsSpec,
    sim: *const TsSimulation,
    theta0: *const f64,
    w0: *const f64,
    out: *mut *mut TsTrajectory,
) -> TsStatus {
    guard(|| {
        let (Some(spec), Some(sim)) = (spec.as_ref(), sim.as_ref()) else {
            return fail(TsStatus::NullPointer, "null argument");
        };
        if theta0.is_null() || w0.is_null() || out.is_null() {
            return fail(TsStatus::NullPointer, "null argument");
        }
        let schedule = match StepsizeSchedule::polynomial(sim.alpha, sim.beta) {
            Ok(s) => s,
            Err(e) => return fail(TsStatus::InvalidArgument, e.to_string()),
        };
        if !(sim.noise_c1 >= 0.0 && sim.noise_c2 >= 0.0) {
            return fail(TsStatus::InvalidArgument, "noise scales must be non-negative");
        }
        let kind = if sim.noise_c1 == 0.0 && sim.noise_c2 == 0.0 {
            NoiseKind::None
        } else {
            NoiseKind::UniformSphere {
                c1: sim.noise_c1,
                c2: sim.noise_c2,
            }
        };
        let mode = if sim.projected {
            Mode::Projected(ProjectionRadii {
                r1in: sim.r1in,
                r2in: sim.r2in,
            })
        } else {
            Mode::Unprojected
        };
        let cfg = RunConfig {
            n_start: sim.n_start,
            n_end: sim.n_end,
            stride: sim.stride,
            mode,
            keep_path: false,
        };
        let d = spec.inner.dim();
        let mut noise = NoiseGenerator::seeded(kind, sim.seed, sim.trial);
        match engine::run_trajectory(
            &spec.inner,
            &schedule,
            &mut noise,
            &cfg,
            read_vec(theta0, d),
            read_vec(w0, d),
        ) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(TsTrajectory { inner }));
                TsStatus::Ok
            }
            Err(e @ engine::EngineError::InvalidConfig(_)) => {
                fail(TsStatus::InvalidArgument, e.to_string())
            }
            Err(e) => fail(TsStatus::Engine, e.to_string()),
        }
    })
}

/// Number of recorded indices, or 0 for a null handle.
///
/// # Safety
/// `traj` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ts_trajectory_len(traj: *const TsTrajectory) -> usize {
    traj.as_ref().map_or(0, |t| t.inner.records.len())
}

/// Index and errors `‖θ_n − θ*‖`, `‖z_n‖` of record `i`.
///
/// # Safety
/// `traj` must be live; output pointers writable.
#[no_mangle]
pub unsafe extern "C" fn ts_trajectory_record(
    traj: *const TsTrajectory,
    i: usize,
    n: *mut usize,
    err_theta: *mut f64,
    err_z: *mut f64,
) -> TsStatus {
    guard(|| {
        let Some(traj) = traj.as_ref() else {
            return fail(TsStatus::NullPointer, "null trajectory");
        };
        if n.is_null() || err_theta.is_null() || err_z.is_null() {
            return fail(TsStatus::NullPointer, "null output");
        }
        let Some(r) = traj.inner.records.get(i) else {
            return fail(
                TsStatus::OutOfRange,
                format!("record {i} out of range (len {})", traj.inner.records.len()),
            );
        };
        *n = r.state.n;
        *err_theta = r.err_theta;
        *err_z = r.err_z;
        TsStatus::Ok
    })
}

/// # Safety
/// `traj` must come from [`ts_simulate`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn ts_trajectory_free(traj: *mut TsTrajectory) {
    if !traj.is_null() {
        drop(Box::from_raw(traj));
    }
}
