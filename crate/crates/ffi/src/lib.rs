//! C ABI over the sparsepanel toolkit.
//!
//! Panels and posterior summaries cross the boundary as opaque handles that
//! the caller releases with the matching `*_free` function. Every fallible
//! function returns an [`SpStatus`]; on failure a description is available
//! from [`sp_last_error_message`] on the same thread. Missing panel cells are
//! exchanged as NaN, and matrices are row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use nalgebra::DMatrix;
use sparsepanel::bhm::{fit_mcmc, fit_vi, posterior_summary, BhmData, BhmSpec, McmcConfig, ParamSummary, ViConfig};
use sparsepanel::factor::{fit_em, FactorConfig};
use sparsepanel::impute::{impute, ImputeSettings, Method};
use sparsepanel::panel::{Entity, PanelMatrix, Sector};
use sparsepanel::sparse_reg::{cv_lasso, fit_lasso, standardize, PathParams};
use sparsepanel::synth::{gen_hierarchical_panel, gen_lowrank_panel, inject_missing, HierConfig, Mechanism, MissingnessSpec, SynthConfig};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// A path or string argument was not valid UTF-8.
    Utf8 = 3,
    Io = 4,
    /// The computation itself failed; see the last error message.
    Compute = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpImputeMethod {
    SoftImpute = 0,
    Mean = 1,
    Interp = 2,
    Chained = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpBhmMethod {
    Mcmc = 0,
    Vi = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpMechanism {
    Mcar = 0,
    BlockByCountry = 1,
    TailYears = 2,
}

/// Marginal posterior summary of one parameter. `rhat` and `ess` are NaN
/// when not defined (variational fits).
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpParamSummary {
    pub mean: f64,
    pub sd: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
    pub rhat: f64,
    pub ess: f64,
}

/// Opaque panel handle.
pub struct SpPanel(PanelMatrix);

/// Opaque posterior-summary handle.
pub struct SpPosterior {
    rows: Vec<ParamSummary>,
    names: Vec<CString>,
}

#[derive(Debug, thiserror::Error)]
enum FfiError {
    #[error("null pointer passed for `{0}`")]
    Null(&'static str),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("`{0}` is not valid UTF-8")]
    Utf8(&'static str),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Compute(String),
}

impl FfiError {
    fn status(&self) -> SpStatus {
        match self {
            FfiError::Null(_) => SpStatus::NullPointer,
            FfiError::Invalid(_) => SpStatus::InvalidArgument,
            FfiError::Utf8(_) => SpStatus::Utf8,
            FfiError::Io(_) => SpStatus::Io,
            FfiError::Compute(_) => SpStatus::Compute,
        }
    }
}

fn compute<E: std::fmt::Display>(e: E) -> FfiError {
    FfiError::Compute(e.to_string())
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Runs `f`, records any error or panic, and converts it to a status.
fn guard(f: impl FnOnce() -> Result<(), FfiError>) -> SpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            SpStatus::Ok
        }
        Ok(Err(e)) => {
            set_last_error(&e.to_string());
            e.status()
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .map(String::as_str)
                .or_else(|| payload.downcast_ref::<&str>().copied())
                .unwrap_or("unknown panic");
            set_last_error(&format!("panic: {msg}"));
            SpStatus::Panic
        }
    }
}

unsafe fn reference<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, FfiError> {
    p.as_ref().ok_or(FfiError::Null(name))
}

unsafe fn out_ptr<'a, T>(p: *mut T, name: &'static str) -> Result<&'a mut T, FfiError> {
    p.as_mut().ok_or(FfiError::Null(name))
}

unsafe fn slice<'a>(p: *const f64, len: usize, name: &'static str) -> Result<&'a [f64], FfiError> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(FfiError::Null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, name: &'static str) -> Result<&'a mut [f64], FfiError> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(FfiError::Null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path_arg(p: *const c_char, name: &'static str) -> Result<PathBuf, FfiError> {
    if p.is_null() {
        return Err(FfiError::Null(name));
    }
    CStr::from_ptr(p).to_str().map(PathBuf::from).map_err(|_| FfiError::Utf8(name))
}

fn row_major(values: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, values)
}

fn checked_len(rows: usize, cols: usize) -> Result<usize, FfiError> {
    rows.checked_mul(cols).ok_or_else(|| FfiError::Invalid(format!("{rows} x {cols} overflows")))
}

fn emit_panel(out: &mut *mut SpPanel, panel: PanelMatrix) {
    *out = Box::into_raw(Box::new(SpPanel(panel)));
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message describing the last failed call on this thread; empty after a
/// successful call. The pointer stays valid until the next call into the
/// library from the same thread.
#[no_mangle]
pub extern "C" fn sp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a panel from a row-major `rows × cols` array; NaN marks a missing
/// cell. Row `i` becomes entity `R<i+1>:GDP` and column `j` year
/// `year_start + j`.
///
/// # Safety
/// `values` must point to `rows * cols` readable doubles and `out` must be a
/// valid place to store the new handle.
#[no_mangle]
pub unsafe extern "C" fn sp_panel_from_values(
    values: *const f64,
    rows: usize,
    cols: usize,
    year_start: i32,
    out: *mut *mut SpPanel,
) -> SpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let data = slice(values, checked_len(rows, cols)?, "values")?;
        if rows == 0 || cols == 0 {
            return Err(FfiError::Invalid("panel must have at least one row and column".into()));
        }
        let entities = (0..rows).map(|i| Entity::new(format!("R{:03}", i + 1), Sector::Gdp)).collect();
        let years = (0..cols as i32).map(|j| year_start + j).collect();
        let m = row_major(data, rows, cols);
        let mask = m.map(|v| !v.is_nan());
        let panel = PanelMatrix::observed(entities, years, m.map(|v| if v.is_nan() { 0.0 } else { v }))
            .and_then(|p| p.with_mask(mask))
            .map_err(compute)?;
        emit_panel(out, panel);
        Ok(())
    })
}

/// Reads a panel from a long (`country,sector,year,value`) or wide CSV file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid place to store
/// the new handle.
#[no_mangle]
pub unsafe extern "C" fn sp_panel_read_csv(path: *const c_char, out: *mut *mut SpPanel) -> SpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = path_arg(path, "path")?;
        let panel = sparsepanel::cli::read_panel(&path).map_err(compute)?;
        emit_panel(out, panel);
        Ok(())
    })
}

/// Writes a panel as long-format CSV; missing cells are written empty.
///
/// # Safety
/// `panel` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sp_panel_write_csv(panel: *const SpPanel, path: *const c_char) -> SpStatus {
    guard(|| {
        let panel = reference(panel, "panel")?;
        let path = path_arg(path, "path")?;
        panel.0.write_long_csv(File::create(path)?).map_err(compute)
    })
}

/// Number of entity rows; 0 for a null handle.
///
/// # Safety
/// `panel` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sp_panel_rows(panel: *const SpPanel) -> usize {
    panel.as_ref().map_or(0, |p| p.0.n_rows())
}

/// Number of year columns; 0 for a null handle.
///
/// # Safety
/// `panel` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sp_panel_cols(panel: *const SpPanel) -> usize {
    panel.as_ref().map_or(0, |p| p.0.n_cols())
}

/// Number of observed cells; 0 for a null handle.
///
/// # Safety
/// `panel` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sp_panel_observed_count(panel: *const SpPanel) -> usize {
    panel.as_ref().map_or(0, |p| p.0.observed_count())
}

/// Copies the cells into a row-major buffer of `len == rows * cols` doubles,
/// with NaN for missing cells.
///
/// # Safety
/// `panel` must be a live handle and `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sp_panel_copy_values(panel: *const SpPanel, out: *mut f64, len: usize) -> SpStatus {
    guard(|| {
        let p = &reference(panel, "panel")?.0;
        let (rows, cols) = (p.n_rows(), p.n_cols());
        if len != rows * cols {
            return Err(FfiError::Invalid(format!("buffer holds {len} values, panel has {}", rows * cols)));
        }
        let buf = slice_mut(out, len, "out")?;
        for i in 0..rows {
            for j in 0..cols {
                buf[i * cols + j] = p.get(i, j).unwrap_or(f64::NAN);
            }
        }
        Ok(())
    })
}

/// Releases a panel handle. Null is ignored.
///
/// # Safety
/// `panel` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sp_panel_free(panel: *mut SpPanel) {
    if !panel.is_null() {
        drop(Box::from_raw(panel));
    }
}

/// Simulates a fully observed rank-`rank` panel with `n_countries × 4`
/// sector rows over `year_start..=year_end`.
///
/// # Safety
/// `out` must be a valid place to store the new handle.
#[no_mangle]
pub unsafe extern "C" fn sp_simulate_lowrank(
    n_countries: usize,
    year_start: i32,
    year_end: i32,
    rank: usize,
    noise_sd: f64,
    seed: u64,
    out: *mut *mut SpPanel,
) -> SpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let cfg = SynthConfig { n_countries, year_start, year_end, rank, noise_sd, seed, ..SynthConfig::default() };
        emit_panel(out, gen_lowrank_panel(&cfg).map_err(compute)?.panel);
        Ok(())
    })
}

/// Simulates an outcome panel and one covariate panel from the hierarchical
/// model with default effect sizes.
///
/// # Safety
/// `y_out` and `x_out` must be valid places to store the new handles.
#[no_mangle]
pub unsafe extern "C" fn sp_simulate_hierarchical(
    n_entities: usize,
    n_years: usize,
    seed: u64,
    y_out: *mut *mut SpPanel,
    x_out: *mut *mut SpPanel,
) -> SpStatus {
    guard(|| {
        let y_out = out_ptr(y_out, "y_out")?;
        let x_out = out_ptr(x_out, "x_out")?;
        let cfg = HierConfig { n_entities, n_years, seed, ..HierConfig::default() };
        let mut h = gen_hierarchical_panel(&cfg).map_err(compute)?;
        let x = h.covariates.pop().ok_or_else(|| FfiError::Compute("no covariate generated".into()))?;
        emit_panel(y_out, h.y);
        emit_panel(x_out, x);
        Ok(())
    })
}

/// Masks a further `fraction` of the observed cells.
///
/// # Safety
/// `panel` must be a live handle and `out` a valid place for the new handle.
#[no_mangle]
pub unsafe extern "C" fn sp_inject_missing(
    panel: *const SpPanel,
    mechanism: SpMechanism,
    fraction: f64,
    seed: u64,
    out: *mut *mut SpPanel,
) -> SpStatus {
    guard(|| {
        let p = &reference(panel, "panel")?.0;
        let out = out_ptr(out, "out")?;
        let mechanism = match mechanism {
            SpMechanism::Mcar => Mechanism::Mcar,
            SpMechanism::BlockByCountry => Mechanism::BlockByCountry,
            SpMechanism::TailYears => Mechanism::TailYears,
        };
        let masked = inject_missing(p, &MissingnessSpec { mechanism, fraction, seed }).map_err(compute)?;
        emit_panel(out, masked);
        Ok(())
    })
}

/// Completes a panel with the chosen method and default settings; `seed`
/// drives the random forest of the chained method.
///
/// # Safety
/// `panel` must be a live handle and `out` a valid place for the new handle.
#[no_mangle]
pub unsafe extern "C" fn sp_impute(
    panel: *const SpPanel,
    method: SpImputeMethod,
    seed: u64,
    out: *mut *mut SpPanel,
) -> SpStatus {
    guard(|| {
        let p = &reference(panel, "panel")?.0;
        let out = out_ptr(out, "out")?;
        let method = match method {
            SpImputeMethod::SoftImpute => Method::SoftImpute,
            SpImputeMethod::Mean => Method::Mean,
            SpImputeMethod::Interp => Method::LinearInterp,
            SpImputeMethod::Chained => Method::Chained,
        };
        let result = impute(p, method, &ImputeSettings::default().reseeded(seed)).map_err(compute)?;
        emit_panel(out, result.completed);
        Ok(())
    })
}

/// Fits the hierarchical model `y = β₀ + Σ βₖ xₖ + γ_entity + δ_year + ε` with
/// priors scaled to the data. Covariate `k` is reported as `x<k+1>`.
///
/// # Safety
/// `y` must be a live handle; `covariates` must point to `n_covariates` live
/// handles (or be null when `n_covariates == 0`); `out` must be a valid place
/// for the new handle.
#[no_mangle]
pub unsafe extern "C" fn sp_bhm_fit(
    y: *const SpPanel,
    covariates: *const *const SpPanel,
    n_covariates: usize,
    method: SpBhmMethod,
    seed: u64,
    out: *mut *mut SpPosterior,
) -> SpStatus {
    guard(|| {
        let y = &reference(y, "y")?.0;
        let out = out_ptr(out, "out")?;
        let handles: &[*const SpPanel] = if n_covariates == 0 {
            &[]
        } else if covariates.is_null() {
            return Err(FfiError::Null("covariates"));
        } else {
            std::slice::from_raw_parts(covariates, n_covariates)
        };
        let covs = handles
            .iter()
            .enumerate()
            .map(|(k, &h)| Ok((format!("x{}", k + 1), reference(h, "covariates[k]")?.0.clone())))
            .collect::<Result<Vec<_>, FfiError>>()?;
        let data = BhmData::from_panel(y, &covs).map_err(compute)?;
        let spec = BhmSpec::scaled_to(&data);
        let rows = match method {
            SpBhmMethod::Mcmc => {
                posterior_summary(&fit_mcmc(&data, &spec, &McmcConfig { seed, ..McmcConfig::default() }).map_err(compute)?)
            }
            SpBhmMethod::Vi => posterior_summary(&fit_vi(&data, &spec, &ViConfig { seed, ..ViConfig::default() }).map_err(compute)?),
        };
        let names = rows.iter().map(|r| CString::new(r.param.clone()).unwrap_or_default()).collect();
        *out = Box::into_raw(Box::new(SpPosterior { rows, names }));
        Ok(())
    })
}

/// Number of summarised parameters; 0 for a null handle.
///
/// # Safety
/// `posterior` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sp_posterior_len(posterior: *const SpPosterior) -> usize {
    posterior.as_ref().map_or(0, |p| p.rows.len())
}

/// Name of parameter `index` (e.g. `beta0`, `gamma[R001:GDP]`, `sigma`), or
/// null when out of range. Owned by the handle.
///
/// # Safety
/// `posterior` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sp_posterior_name(posterior: *const SpPosterior, index: usize) -> *const c_char {
    posterior.as_ref().and_then(|p| p.names.get(index)).map_or(ptr::null(), |n| n.as_ptr())
}

/// Copies the summary of parameter `index` into `out`.
///
/// # Safety
/// `posterior` must be a live handle and `out` a writable `SpParamSummary`.
#[no_mangle]
pub unsafe extern "C" fn sp_posterior_get(
    posterior: *const SpPosterior,
    index: usize,
    out: *mut SpParamSummary,
) -> SpStatus {
    guard(|| {
        let p = reference(posterior, "posterior")?;
        let out = out_ptr(out, "out")?;
        let r = p.rows.get(index).ok_or_else(|| FfiError::Invalid(format!("index {index} >= {}", p.rows.len())))?;
        *out = SpParamSummary {
            mean: r.mean,
            sd: r.sd,
            q05: r.q05,
            q50: r.q50,
            q95: r.q95,
            rhat: r.rhat.unwrap_or(f64::NAN),
            ess: r.ess.unwrap_or(f64::NAN),
        };
        Ok(())
    })
}

/// Releases a posterior handle. Null is ignored.
///
/// # Safety
/// `posterior` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sp_posterior_free(posterior: *mut SpPosterior) {
    if !posterior.is_null() {
        drop(Box::from_raw(posterior));
    }
}

/// Cross-validated LASSO on a row-major `n × p` design. Predictors are
/// standardised internally and `beta_out` (length `p`) holds coefficients on
/// the standardised scale; zero means the predictor was dropped. With
/// `one_se` non-zero the one-standard-error λ is used instead of the
/// minimum-error λ.
///
/// # Safety
/// `x` must point to `n * p` doubles, `y` to `n`, `beta_out` to `p` writable
/// doubles, and `intercept_out`/`lambda_out` to writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sp_lasso_cv(
    x: *const f64,
    n: usize,
    p: usize,
    y: *const f64,
    folds: usize,
    one_se: bool,
    seed: u64,
    beta_out: *mut f64,
    intercept_out: *mut f64,
    lambda_out: *mut f64,
) -> SpStatus {
    guard(|| {
        let x = row_major(slice(x, checked_len(n, p)?, "x")?, n, p);
        let y = slice(y, n, "y")?;
        let beta_out = slice_mut(beta_out, p, "beta_out")?;
        let intercept_out = out_ptr(intercept_out, "intercept_out")?;
        let lambda_out = out_ptr(lambda_out, "lambda_out")?;
        let (z, _) = standardize(&x).map_err(compute)?;
        let params = PathParams::default();
        let cv = cv_lasso(&z, y, folds, &params, seed).map_err(compute)?;
        let lambda = if one_se { cv.lambda_1se } else { cv.best_lambda };
        let fit = fit_lasso(&z, y, lambda, params.tol, params.max_iters).map_err(compute)?;
        beta_out.copy_from_slice(&fit.beta);
        *intercept_out = fit.intercept;
        *lambda_out = lambda;
        Ok(())
    })
}

/// Maximum-likelihood factor analysis of a row-major `n × p` matrix with `k`
/// factors. Writes the `p × k` loadings (row-major), the `p` uniquenesses and
/// the final log-likelihood.
///
/// # Safety
/// `y` must point to `n * p` doubles, `loadings_out` to `p * k` and
/// `uniquenesses_out` to `p` writable doubles, `loglik_out` to one.
#[no_mangle]
pub unsafe extern "C" fn sp_factor_fit(
    y: *const f64,
    n: usize,
    p: usize,
    k: usize,
    seed: u64,
    loadings_out: *mut f64,
    uniquenesses_out: *mut f64,
    loglik_out: *mut f64,
) -> SpStatus {
    guard(|| {
        let y = row_major(slice(y, checked_len(n, p)?, "y")?, n, p);
        let loadings_out = slice_mut(loadings_out, checked_len(p, k)?, "loadings_out")?;
        let uniquenesses_out = slice_mut(uniquenesses_out, p, "uniquenesses_out")?;
        let loglik_out = out_ptr(loglik_out, "loglik_out")?;
        let model = fit_em(&y, k, &FactorConfig { seed, ..FactorConfig::default() }).map_err(compute)?;
        for i in 0..p {
            for j in 0..k {
                loadings_out[i * k + j] = model.loadings[(i, j)];
            }
        }
        uniquenesses_out.copy_from_slice(&model.uniquenesses);
        *loglik_out = model.loglik();
        Ok(())
    })
}
