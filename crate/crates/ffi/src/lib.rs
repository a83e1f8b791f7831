//! C ABI over `difflab`.
//!
//! Every fallible function returns a [`DlStatus`]; on failure the message is
//! available from [`dl_last_error`] on the same thread. Models and samples are
//! opaque handles released with their `_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use difflab::bounds::{gaussian_tv_bound, gaussian_tv_exact_1d, GaussianTvQuery};
use difflab::distances::{kolmogorov_distance_with, rate_fit, tv_scheffe_with, DistanceEstimate, RatePoint};
use difflab::experiment::{parse_config, run_experiment};
use difflab::model::ModelSpec;
use difflab::models::{constant_model, hyperbolic_radial, perturbed_model, PerturbedParams};
use difflab::sde::{simulate_scaled, ScaledSample, SimConfig};
use difflab::LabError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Precondition = 3,
    Numerical = 4,
    InsufficientSample = 5,
    Config = 6,
    Io = 7,
    Aborted = 8,
    Panic = 9,
}

impl From<&LabError> for DlStatus {
    fn from(e: &LabError) -> Self {
        match e {
            LabError::InvalidParameter(_) | LabError::UnknownModel(_) | LabError::InvalidSample { .. } => {
                DlStatus::InvalidArgument
            }
            LabError::Precondition(_) | LabError::LogDomain { .. } | LabError::InsufficientProbe { .. } => {
                DlStatus::Precondition
            }
            LabError::EmptySample | LabError::InsufficientSample { .. } => DlStatus::InsufficientSample,
            LabError::Config { .. } => DlStatus::Config,
            LabError::Io { .. } => DlStatus::Io,
            LabError::Aborted { .. } => DlStatus::Aborted,
            _ => DlStatus::Numerical,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: DlStatus, msg: impl Into<String>) -> DlStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), DlStatus>) -> DlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DlStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(DlStatus::Panic, "internal panic"),
    }
}

fn lab<T>(r: difflab::Result<T>) -> Result<T, DlStatus> {
    r.map_err(|e| fail(DlStatus::from(&e), e.to_string()))
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), DlStatus> {
    if p.is_null() {
        Err(fail(DlStatus::NullPointer, format!("`{name}` is null")))
    } else {
        Ok(())
    }
}

unsafe fn slice<'a>(p: *const f64, n: usize, name: &str) -> Result<&'a [f64], DlStatus> {
    if n == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts(p, n))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn dl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn dl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Opaque model handle.
pub struct DlModel(ModelSpec);

/// Opaque handle to a sample of the scaled statistic.
pub struct DlSample(ScaledSample);

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DlPerturbedParams {
    pub sigma_inf: f64,
    pub drift_inf: f64,
    pub sigma_amp: f64,
    pub drift_amp: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DlDistance {
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Kernel bandwidth, NaN for the Kolmogorov distance.
    pub bandwidth: f64,
    pub n: usize,
}

impl From<DistanceEstimate> for DlDistance {
    fn from(d: DistanceEstimate) -> Self {
        Self {
            value: d.value,
            ci_low: d.ci_low,
            ci_high: d.ci_high,
            bandwidth: d.bandwidth.unwrap_or(f64::NAN),
            n: d.n,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DlRateFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_low: f64,
    pub slope_high: f64,
    pub r2: f64,
}

unsafe fn emit_model(out: *mut *mut DlModel, m: difflab::Result<ModelSpec>) -> Result<(), DlStatus> {
    non_null(out, "out")?;
    *out = ptr::null_mut();
    let m = lab(m)?;
    *out = Box::into_raw(Box::new(DlModel(m)));
    Ok(())
}

/// Constant coefficients `σ ≡ sigma`, `b ≡ drift`.
#[no_mangle]
pub unsafe extern "C" fn dl_model_constant(sigma: f64, drift: f64, out: *mut *mut DlModel) -> DlStatus {
    guard(|| emit_model(out, constant_model(sigma, drift)))
}

#[no_mangle]
pub unsafe extern "C" fn dl_model_perturbed(params: DlPerturbedParams, out: *mut *mut DlModel) -> DlStatus {
    guard(|| {
        emit_model(
            out,
            perturbed_model(PerturbedParams {
                sigma_inf: params.sigma_inf,
                drift_inf: params.drift_inf,
                sigma_amp: params.sigma_amp,
                drift_amp: params.drift_amp,
                alpha: params.alpha,
                beta: params.beta,
            }),
        )
    })
}

/// Default perturbed-model parameters.
#[no_mangle]
pub extern "C" fn dl_perturbed_defaults() -> DlPerturbedParams {
    let p = PerturbedParams::default();
    DlPerturbedParams {
        sigma_inf: p.sigma_inf,
        drift_inf: p.drift_inf,
        sigma_amp: p.sigma_amp,
        drift_amp: p.drift_amp,
        alpha: p.alpha,
        beta: p.beta,
    }
}

/// Radial part of hyperbolic Brownian motion in dimension `d`.
#[no_mangle]
pub unsafe extern "C" fn dl_model_hyperbolic(d: u32, out: *mut *mut DlModel) -> DlStatus {
    guard(|| emit_model(out, hyperbolic_radial(d)))
}

/// Whether the Berry-Esseen hypotheses hold for the model.
#[no_mangle]
pub unsafe extern "C" fn dl_model_theorem_applicable(model: *const DlModel, out: *mut bool) -> DlStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = (*model).0.theorem_applicable;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dl_model_free(model: *mut DlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Simulates `n_paths` values of the scaled statistic at `horizon`.
#[no_mangle]
pub unsafe extern "C" fn dl_simulate_scaled(
    model: *const DlModel,
    horizon: f64,
    steps_per_unit: usize,
    n_paths: usize,
    seed: u64,
    x0: f64,
    out: *mut *mut DlSample,
) -> DlStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let cfg = SimConfig::with_step_density(horizon, steps_per_unit, n_paths, seed, x0);
        let s = lab(simulate_scaled(&(*model).0, &cfg))?;
        *out = Box::into_raw(Box::new(DlSample(s)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dl_sample_len(sample: *const DlSample) -> usize {
    if sample.is_null() {
        0
    } else {
        (*sample).0.len()
    }
}

/// Borrowed pointer to the sample values; valid while the handle lives.
#[no_mangle]
pub unsafe extern "C" fn dl_sample_values(sample: *const DlSample) -> *const f64 {
    if sample.is_null() {
        ptr::null()
    } else {
        (*sample).0.f_values.as_ptr()
    }
}

#[no_mangle]
pub unsafe extern "C" fn dl_sample_free(sample: *mut DlSample) {
    if !sample.is_null() {
        drop(Box::from_raw(sample));
    }
}

/// Kolmogorov distance to N(0,1) with `resamples` bootstrap draws.
#[no_mangle]
pub unsafe extern "C" fn dl_kolmogorov_distance(
    values: *const f64,
    n: usize,
    seed: u64,
    resamples: usize,
    out: *mut DlDistance,
) -> DlStatus {
    guard(|| {
        non_null(out, "out")?;
        let xs = slice(values, n, "values")?;
        *out = lab(kolmogorov_distance_with(xs, seed, resamples))?.into();
        Ok(())
    })
}

/// Total-variation distance to N(0,1); a non-positive `bandwidth` selects
/// Silverman's rule.
#[no_mangle]
pub unsafe extern "C" fn dl_tv_scheffe(
    values: *const f64,
    n: usize,
    bandwidth: f64,
    seed: u64,
    resamples: usize,
    out: *mut DlDistance,
) -> DlStatus {
    guard(|| {
        non_null(out, "out")?;
        let xs = slice(values, n, "values")?;
        let h = (bandwidth > 0.0).then_some(bandwidth);
        *out = lab(tv_scheffe_with(xs, h, seed, resamples))?.into();
        Ok(())
    })
}

/// Log-log fit of `values` against `horizons`. `ci_low`/`ci_high` may both be
/// null, in which case the points are weighted equally.
#[no_mangle]
pub unsafe extern "C" fn dl_rate_fit(
    horizons: *const f64,
    values: *const f64,
    ci_low: *const f64,
    ci_high: *const f64,
    n: usize,
    out: *mut DlRateFit,
) -> DlStatus {
    guard(|| {
        non_null(out, "out")?;
        let t = slice(horizons, n, "horizons")?;
        let v = slice(values, n, "values")?;
        let bands = if ci_low.is_null() && ci_high.is_null() {
            None
        } else {
            Some((slice(ci_low, n, "ci_low")?, slice(ci_high, n, "ci_high")?))
        };
        let pts: Vec<RatePoint> = (0..n)
            .map(|i| match bands {
                Some((lo, hi)) => RatePoint {
                    t: t[i],
                    value: v[i],
                    ci_low: lo[i],
                    ci_high: hi[i],
                },
                None => RatePoint::exact(t[i], v[i]),
            })
            .collect();
        let f = lab(rate_fit(&pts))?;
        *out = DlRateFit {
            slope: f.slope,
            intercept: f.intercept,
            slope_low: f.slope_ci.0,
            slope_high: f.slope_ci.1,
            r2: f.r2,
        };
        Ok(())
    })
}

/// Upper bound on TV(N(0, V), N(v, a²V)); `cov` is row-major `d × d`, or null
/// for the identity.
#[no_mangle]
pub unsafe extern "C" fn dl_gaussian_tv_bound(
    a: f64,
    v: *const f64,
    cov: *const f64,
    d: usize,
    out: *mut f64,
) -> DlStatus {
    guard(|| {
        non_null(out, "out")?;
        let v = slice(v, d, "v")?.to_vec();
        let cov = if cov.is_null() {
            (0..d * d).map(|k| if k % (d + 1) == 0 { 1.0 } else { 0.0 }).collect()
        } else {
            slice(cov, d * d, "cov")?.to_vec()
        };
        *out = lab(gaussian_tv_bound(&GaussianTvQuery { a, v, cov }))?;
        Ok(())
    })
}

/// Exact TV(N(0,1), N(v, a²)).
#[no_mangle]
pub unsafe extern "C" fn dl_gaussian_tv_exact_1d(a: f64, v: f64, out: *mut f64) -> DlStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = lab(gaussian_tv_exact_1d(a, v))?;
        Ok(())
    })
}

/// Runs the experiment described by a TOML document. `output_dir` overrides
/// the configured directory when non-null; `passed` receives the verdict.
#[no_mangle]
pub unsafe extern "C" fn dl_run_experiment(
    config_toml: *const c_char,
    output_dir: *const c_char,
    passed: *mut bool,
) -> DlStatus {
    guard(|| {
        non_null(config_toml, "config_toml")?;
        let text = CStr::from_ptr(config_toml)
            .to_str()
            .map_err(|_| fail(DlStatus::InvalidArgument, "config is not UTF-8"))?;
        let mut cfg = lab(parse_config(text))?;
        if !output_dir.is_null() {
            let dir = CStr::from_ptr(output_dir)
                .to_str()
                .map_err(|_| fail(DlStatus::InvalidArgument, "output_dir is not UTF-8"))?;
            cfg.output_dir = PathBuf::from(dir);
        }
        let report = lab(run_experiment(&cfg))?;
        if !passed.is_null() {
            *passed = report.passed();
        }
        Ok(())
    })
}
