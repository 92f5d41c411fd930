//! Nuclear-norm regularised matrix completion.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{require_rows_observed, ImputationResult, ImputeError, Method, Result, TraceRow};
use crate::panel::PanelMatrix;

/// `sign(x) · max(|x| − t, 0)`
pub fn soft_threshold(x: f64, t: f64) -> f64 {
    debug_assert!(t >= 0.0);
    x.signum() * (x.abs() - t).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SoftImputeConfig {
    /// Absolute penalty on singular values; ignored when `lambda_as_fraction` is set.
    pub lambda: f64,
    pub max_iters: usize,
    /// Relative change in observed-cell MAE that ends the iteration.
    pub tol: f64,
    /// Penalty as a fraction of the largest singular value of the initial fill.
    pub lambda_as_fraction: Option<f64>,
}

impl Default for SoftImputeConfig {
    fn default() -> Self {
        SoftImputeConfig {
            lambda: 0.0,
            max_iters: 1000,
            tol: 1e-6,
            lambda_as_fraction: Some(0.02),
        }
    }
}

impl SoftImputeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(ImputeError::InvalidConfig("max_iters must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(ImputeError::InvalidConfig("tol must be > 0".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(ImputeError::InvalidConfig("lambda must be >= 0".into()));
        }
        if let Some(f) = self.lambda_as_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(ImputeError::InvalidConfig("lambda_as_fraction must lie in (0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// SoftImpute: alternate a singular-value soft-threshold of the filled
/// matrix with restoring the observed cells.
///
/// Columns are centred before each SVD and the centring is undone after
/// reconstruction. Observed cells of the result equal the input exactly.
pub fn soft_impute(m: &PanelMatrix, cfg: &SoftImputeConfig) -> Result<ImputationResult> {
    cfg.validate()?;
    require_rows_observed(m, ImputeError::NoObservedCells)?;
    let (n, t) = (m.n_rows(), m.n_cols());
    let mask = m.mask();
    let x = m.values();
    let n_obs = m.observed_count();
    let n_missing = n * t - n_obs;

    let grand_mean = x.iter().zip(mask.iter()).filter(|(_, &o)| o).map(|(v, _)| v).sum::<f64>() / n_obs as f64;
    let col_means: Vec<f64> = (0..t)
        .map(|j| {
            let (s, c) = (0..n)
                .filter(|&i| mask[(i, j)])
                .fold((0.0, 0usize), |(s, c), i| (s + x[(i, j)], c + 1));
            if c == 0 {
                grand_mean
            } else {
                s / c as f64
            }
        })
        .collect();
    // Missing cells start at their column's observed mean, i.e. zero in the
    // centred frame. The column offsets are re-estimated from the current
    // completion every iteration and left unpenalised, so centring never adds
    // rank to the low-rank part.
    let mut filled = DMatrix::from_fn(n, t, |i, j| if mask[(i, j)] { x[(i, j)] } else { col_means[j] });
    let centred = |z: &DMatrix<f64>| -> (DMatrix<f64>, Vec<f64>) {
        let means: Vec<f64> = (0..t).map(|j| z.column(j).mean()).collect();
        (DMatrix::from_fn(n, t, |i, j| z[(i, j)] - means[j]), means)
    };
    let sigma_max = centred(&filled)
        .0
        .try_svd(false, false, f64::EPSILON, 0)
        .ok_or(ImputeError::SvdFailure(0))?
        .singular_values
        .max();
    let lambda = match cfg.lambda_as_fraction {
        Some(f) => f * sigma_max,
        None => cfg.lambda,
    };

    let mut trace: Vec<TraceRow> = Vec::new();
    let mut iterations = 0;
    for iter in 1..=cfg.max_iters {
        iterations = iter;
        let (c, means) = centred(&filled);
        let svd = c.try_svd(true, true, f64::EPSILON, 0).ok_or(ImputeError::SvdFailure(iter))?;
        let u = svd.u.as_ref().ok_or(ImputeError::SvdFailure(iter))?;
        let v_t = svd.v_t.as_ref().ok_or(ImputeError::SvdFailure(iter))?;
        let s_max = svd.singular_values.max();
        let shrunk: Vec<f64> = svd.singular_values.iter().map(|&s| soft_threshold(s, lambda)).collect();
        let rank = shrunk.iter().filter(|&&s| s > 1e-10 * s_max).count();

        let mut recon = DMatrix::from_fn(n, t, |_, j| means[j]);
        for (k, &s) in shrunk.iter().enumerate() {
            if s > 0.0 {
                recon += (u.column(k) * s) * v_t.row(k);
            }
        }

        let (mut abs, mut sq) = (0.0, 0.0);
        let mut change = 0.0f64;
        for i in 0..n {
            for j in 0..t {
                if mask[(i, j)] {
                    let d = recon[(i, j)] - x[(i, j)];
                    abs += d.abs();
                    sq += d * d;
                } else {
                    change = change.max((recon[(i, j)] - filled[(i, j)]).abs());
                    filled[(i, j)] = recon[(i, j)];
                }
            }
        }
        let mae = abs / n_obs as f64;
        let row = TraceRow {
            iter,
            observed_mae: mae,
            observed_mse: sq / n_obs as f64,
            rank: Some(rank),
        };
        let prev = trace.last().map(|r| r.observed_mae);
        trace.push(row);

        if n_missing == 0 || change == 0.0 {
            break;
        }
        if let Some(prev) = prev {
            if (prev - mae).abs() <= cfg.tol * prev.max(f64::MIN_POSITIVE) {
                break;
            }
        }
    }

    let completed = DMatrix::from_fn(n, t, |i, j| if mask[(i, j)] { x[(i, j)] } else { filled[(i, j)] });
    if completed.iter().any(|v| !v.is_finite()) {
        return Err(ImputeError::NonFinite("soft_impute produced non-finite cells".into()));
    }
    Ok(ImputationResult {
        completed: m.with_values(completed)?,
        iterations,
        trace,
        method: Method::SoftImpute,
        sigma_max: Some(sigma_max),
        lambda: Some(lambda),
    })
}
