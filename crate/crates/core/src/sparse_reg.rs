//! LASSO by cyclic coordinate descent.
//!
//! The objective is `(1/2n)·‖y − b₀ − Zβ‖² + λ‖β‖₁` with an unpenalised
//! intercept. Multiply λ by `2n` to express it on the unnormalised
//! `Σ residual² + λ'‖β‖₁` scale.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum LassoError {
    #[error("every column of the design is constant")]
    AllConstantDesign,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("too few rows: {rows} rows for {folds} folds")]
    TooFewRows { rows: usize, folds: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, LassoError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    /// Population standard deviation (denominator n).
    pub sd: f64,
    pub constant: bool,
}

/// Centres each column and scales it to unit population variance.
///
/// Constant columns become all-zero and are flagged; their coefficient is
/// always zero.
pub fn standardize(x: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<ColumnStats>)> {
    let (n, p) = x.shape();
    if n == 0 || p == 0 {
        return Err(LassoError::ShapeMismatch(format!("empty design {n}x{p}")));
    }
    let stats: Vec<ColumnStats> = (0..p)
        .map(|k| {
            let col = x.column(k);
            let mean = col.mean();
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            let constant = !(sd > 1e-12 * mean.abs().max(1.0));
            ColumnStats { mean, sd, constant }
        })
        .collect();
    if stats.iter().all(|s| s.constant) {
        return Err(LassoError::AllConstantDesign);
    }
    let z = DMatrix::from_fn(n, p, |i, k| {
        let s = &stats[k];
        if s.constant {
            0.0
        } else {
            (x[(i, k)] - s.mean) / s.sd
        }
    });
    Ok((z, stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    pub beta: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub selected: Vec<usize>,
    /// Set when the fit came from raw predictors via [`fit_lasso_raw`].
    pub standardization: Option<Vec<ColumnStats>>,
    pub converged: bool,
    pub cycles: usize,
    /// Objective after each full coordinate cycle.
    pub objective_trace: Vec<f64>,
}

impl LassoFit {
    pub fn predict(&self, z: &DMatrix<f64>) -> Vec<f64> {
        (0..z.nrows())
            .map(|i| self.intercept + (0..z.ncols()).map(|k| z[(i, k)] * self.beta[k]).sum::<f64>())
            .collect()
    }

    /// Predictions from unstandardised predictors.
    pub fn predict_raw(&self, x: &DMatrix<f64>) -> Vec<f64> {
        match &self.standardization {
            None => self.predict(x),
            Some(stats) => {
                let z = DMatrix::from_fn(x.nrows(), x.ncols(), |i, k| {
                    let s = &stats[k];
                    if s.constant {
                        0.0
                    } else {
                        (x[(i, k)] - s.mean) / s.sd
                    }
                });
                self.predict(&z)
            }
        }
    }
}

struct Centered {
    z: DMatrix<f64>,
    y: DVector<f64>,
    z_mean: Vec<f64>,
    y_mean: f64,
    /// `z_kᵀ z_k / n` for each centred column.
    curvature: Vec<f64>,
}

fn center(z: &DMatrix<f64>, y: &[f64]) -> Result<Centered> {
    let (n, p) = z.shape();
    if n != y.len() {
        return Err(LassoError::ShapeMismatch(format!("{n} rows vs {} targets", y.len())));
    }
    if n == 0 {
        return Err(LassoError::ShapeMismatch("no rows".into()));
    }
    let z_mean: Vec<f64> = (0..p).map(|k| z.column(k).mean()).collect();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let zc = DMatrix::from_fn(n, p, |i, k| z[(i, k)] - z_mean[k]);
    let curvature = (0..p).map(|k| zc.column(k).norm_squared() / n as f64).collect();
    Ok(Centered {
        y: DVector::from_iterator(n, y.iter().map(|v| v - y_mean)),
        z: zc,
        z_mean,
        y_mean,
        curvature,
    })
}

/// Smallest λ at which every coefficient is zero.
pub fn lambda_max(z: &DMatrix<f64>, y: &[f64]) -> Result<f64> {
    let c = center(z, y)?;
    Ok(max_abs_gradient(&c))
}

fn max_abs_gradient(c: &Centered) -> f64 {
    let n = c.y.len() as f64;
    (0..c.z.ncols())
        .map(|k| (c.z.column(k).dot(&c.y) / n).abs())
        .fold(0.0, f64::max)
}

fn objective(c: &Centered, resid: &DVector<f64>, beta: &[f64], lambda: f64) -> f64 {
    let n = c.y.len() as f64;
    resid.norm_squared() / (2.0 * n) + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
}

fn soft(x: f64, t: f64) -> f64 {
    x.signum() * (x.abs() - t).max(0.0)
}

fn coordinate_descent(c: &Centered, lambda: f64, tol: f64, max_iters: usize, warm: Option<&[f64]>) -> LassoFit {
    let (n, p) = c.z.shape();
    let nf = n as f64;
    let mut beta = warm.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p]);
    let mut resid = c.y.clone();
    for k in 0..p {
        if beta[k] != 0.0 {
            resid.axpy(-beta[k], &c.z.column(k), 1.0);
        }
    }
    let mut trace = Vec::new();
    let mut converged = false;
    let mut cycles = 0;
    while cycles < max_iters {
        cycles += 1;
        let mut max_change = 0.0f64;
        for k in 0..p {
            let curv = c.curvature[k];
            if curv <= 1e-14 {
                beta[k] = 0.0;
                continue;
            }
            let rho = c.z.column(k).dot(&resid) / nf + curv * beta[k];
            let new = soft(rho, lambda) / curv;
            let delta = new - beta[k];
            if delta != 0.0 {
                resid.axpy(-delta, &c.z.column(k), 1.0);
                beta[k] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        trace.push(objective(c, &resid, &beta, lambda));
        if max_change < tol {
            converged = true;
            break;
        }
    }
    let intercept = c.y_mean - beta.iter().zip(&c.z_mean).map(|(b, m)| b * m).sum::<f64>();
    LassoFit {
        selected: (0..p).filter(|&k| beta[k] != 0.0).collect(),
        beta,
        intercept,
        lambda,
        standardization: None,
        converged,
        cycles,
        objective_trace: trace,
    }
}

pub const DEFAULT_TOL: f64 = 1e-7;
pub const DEFAULT_MAX_ITERS: usize = 100_000;

/// Coordinate-descent LASSO on a (standardised) design.
///
/// Columns are visited in ascending order each cycle until the largest
/// coefficient change falls below `tol`. A fit that exhausts `max_iters`
/// cycles is returned with `converged = false`.
pub fn fit_lasso(z: &DMatrix<f64>, y: &[f64], lambda: f64, tol: f64, max_iters: usize) -> Result<LassoFit> {
    fit_lasso_warm(z, y, lambda, tol, max_iters, None)
}

pub fn fit_lasso_warm(
    z: &DMatrix<f64>,
    y: &[f64],
    lambda: f64,
    tol: f64,
    max_iters: usize,
    warm: Option<&[f64]>,
) -> Result<LassoFit> {
    if !(lambda >= 0.0) {
        return Err(LassoError::InvalidArgument(format!("lambda {lambda} < 0")));
    }
    if let Some(w) = warm {
        if w.len() != z.ncols() {
            return Err(LassoError::ShapeMismatch("warm start length".into()));
        }
    }
    let c = center(z, y)?;
    Ok(coordinate_descent(&c, lambda, tol, max_iters.max(1), warm))
}

/// Standardises raw predictors, fits, and keeps the column statistics.
pub fn fit_lasso_raw(x: &DMatrix<f64>, y: &[f64], lambda: f64, tol: f64, max_iters: usize) -> Result<LassoFit> {
    let (z, stats) = standardize(x)?;
    let mut fit = fit_lasso(&z, y, lambda, tol, max_iters)?;
    fit.standardization = Some(stats);
    Ok(fit)
}

/// Largest violation of the LASSO optimality conditions.
///
/// For zero coefficients `|z_kᵀr/n| ≤ λ`; for non-zero ones
/// `z_kᵀr/n = λ·sign(β_k)`.
pub fn kkt_violation(z: &DMatrix<f64>, y: &[f64], fit: &LassoFit) -> Result<f64> {
    let c = center(z, y)?;
    let n = c.y.len() as f64;
    let mut resid = c.y.clone();
    for (k, &b) in fit.beta.iter().enumerate() {
        if b != 0.0 {
            resid.axpy(-b, &c.z.column(k), 1.0);
        }
    }
    Ok((0..c.z.ncols())
        .map(|k| {
            if c.curvature[k] <= 1e-14 {
                return 0.0;
            }
            let g = c.z.column(k).dot(&resid) / n;
            let b = fit.beta[k];
            if b == 0.0 {
                (g.abs() - fit.lambda).max(0.0)
            } else {
                (g - fit.lambda * b.signum()).abs()
            }
        })
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathParams {
    pub n_lambdas: usize,
    /// Smallest λ as a fraction of λ_max.
    pub ratio: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for PathParams {
    fn default() -> Self {
        PathParams {
            n_lambdas: 100,
            ratio: 1e-3,
            tol: DEFAULT_TOL,
            max_iters: DEFAULT_MAX_ITERS,
        }
    }
}

fn grid(lmax: f64, params: &PathParams) -> Vec<f64> {
    let k = params.n_lambdas;
    let lmax = if lmax > 0.0 { lmax } else { 1e-12 };
    (0..k)
        .map(|i| lmax * params.ratio.powf(i as f64 / (k - 1) as f64))
        .collect()
}

impl PathParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_lambdas < 2 {
            return Err(LassoError::InvalidArgument("n_lambdas must be >= 2".into()));
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(LassoError::InvalidArgument("ratio must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

fn path_on_grid(c: &Centered, lambdas: &[f64], params: &PathParams) -> Vec<LassoFit> {
    let mut fits: Vec<LassoFit> = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let warm = fits.last().map(|f| f.beta.clone());
        fits.push(coordinate_descent(c, lambda, params.tol, params.max_iters.max(1), warm.as_deref()));
    }
    fits
}

/// Fits along a log-spaced grid from λ_max down to `ratio·λ_max`, warm
/// starting each fit from the previous one.
pub fn lambda_path(z: &DMatrix<f64>, y: &[f64], params: &PathParams) -> Result<Vec<LassoFit>> {
    params.validate()?;
    let c = center(z, y)?;
    let lambdas = grid(max_abs_gradient(&c), params);
    Ok(path_on_grid(&c, &lambdas, params))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPoint {
    pub lambda: f64,
    pub mean_mse: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub best_lambda: f64,
    pub best_index: usize,
    /// Largest λ whose CV error is within one standard error of the minimum.
    pub lambda_1se: f64,
    pub curve: Vec<CvPoint>,
    pub folds: Vec<usize>,
}

/// K-fold cross-validation over the λ path of the full data.
pub fn cv_lasso(z: &DMatrix<f64>, y: &[f64], n_folds: usize, params: &PathParams, seed: u64) -> Result<CvResult> {
    params.validate()?;
    let n = z.nrows();
    if n_folds < 2 || n < n_folds {
        return Err(LassoError::TooFewRows { rows: n, folds: n_folds });
    }
    let full = center(z, y)?;
    let lambdas = grid(max_abs_gradient(&full), params);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::label_tag("cv-folds")));
    let mut fold_of = vec![0usize; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % n_folds;
    }

    let per_fold: Vec<Result<Vec<f64>>> = (0..n_folds)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
            let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
            let pick = |rows: &[usize]| DMatrix::from_fn(rows.len(), z.ncols(), |r, k| z[(rows[r], k)]);
            let y_train: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let c = center(&pick(&train), &y_train)?;
            let z_test = pick(&test);
            Ok(path_on_grid(&c, &lambdas, params)
                .iter()
                .map(|fit| {
                    let pred = fit.predict(&z_test);
                    test.iter().zip(pred).map(|(&i, p)| (y[i] - p).powi(2)).sum::<f64>() / test.len() as f64
                })
                .collect())
        })
        .collect();
    let per_fold = per_fold.into_iter().collect::<Result<Vec<_>>>()?;

    let k = n_folds as f64;
    let curve: Vec<CvPoint> = lambdas
        .iter()
        .enumerate()
        .map(|(j, &lambda)| {
            let errs: Vec<f64> = per_fold.iter().map(|f| f[j]).collect();
            let mean = errs.iter().sum::<f64>() / k;
            let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (k - 1.0);
            CvPoint {
                lambda,
                mean_mse: mean,
                se: (var / k).sqrt(),
            }
        })
        .collect();
    let best_index = curve
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.mean_mse.total_cmp(&b.1.mean_mse))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let cutoff = curve[best_index].mean_mse + curve[best_index].se;
    let lambda_1se = curve
        .iter()
        .find(|p| p.mean_mse <= cutoff)
        .map(|p| p.lambda)
        .unwrap_or(curve[best_index].lambda);
    Ok(CvResult {
        best_lambda: curve[best_index].lambda,
        best_index,
        lambda_1se,
        curve,
        folds: fold_of,
    })
}

/// JSON export of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoReport {
    pub lambda: f64,
    pub intercept: f64,
    pub beta: Vec<f64>,
    pub selected: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub predictors: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub selected_names: Vec<String>,
    pub cv_curve: Vec<CvPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_1se: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
}

impl LassoReport {
    pub fn new(fit: &LassoFit, predictors: &[String], cv: Option<&CvResult>) -> Self {
        LassoReport {
            lambda: fit.lambda,
            intercept: fit.intercept,
            beta: fit.beta.clone(),
            selected: fit.selected.clone(),
            predictors: predictors.to_vec(),
            selected_names: fit
                .selected
                .iter()
                .filter_map(|&k| predictors.get(k).cloned())
                .collect(),
            cv_curve: cv.map(|c| c.curve.clone()).unwrap_or_default(),
            lambda_1se: cv.map(|c| c.lambda_1se),
            rmse: None,
        }
    }
}
