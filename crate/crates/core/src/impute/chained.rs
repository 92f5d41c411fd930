//! Chained-equation imputation over the year columns of a panel.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::forest::{fit_forest, predict_forest, ForestConfig};
use super::{mean_impute, ImputationResult, ImputeError, Method, Result, TraceRow};
use crate::panel::PanelMatrix;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Learner {
    Forest(ForestConfig),
    /// Least-squares line on the mean of the row's other columns.
    RowMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainedConfig {
    pub learner: Learner,
    pub sweeps: usize,
    /// Stop early once no imputed cell moves by more than this.
    pub tol: f64,
}

impl Default for ChainedConfig {
    fn default() -> Self {
        ChainedConfig {
            learner: Learner::Forest(ForestConfig::default()),
            sweeps: 5,
            tol: 1e-6,
        }
    }
}

impl ChainedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sweeps == 0 {
            return Err(ImputeError::InvalidConfig("sweeps must be >= 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(ImputeError::InvalidConfig("tol must be >= 0".into()));
        }
        match &self.learner {
            Learner::Forest(f) => f.validate(),
            _ => Ok(()),
        }
    }
}

fn drop_column(x: &DMatrix<f64>, rows: &[usize], col: usize) -> DMatrix<f64> {
    let p = x.ncols() - 1;
    DMatrix::from_fn(rows.len(), p, |r, k| {
        let j = if k < col { k } else { k + 1 };
        x[(rows[r], j)]
    })
}

fn row_means(x: &DMatrix<f64>) -> Vec<f64> {
    (0..x.nrows()).map(|i| x.row(i).mean()).collect()
}

/// Fits on `train` and predicts both the training rows and `test`.
fn fit_predict(
    learner: &Learner,
    col: usize,
    train: &DMatrix<f64>,
    y: &[f64],
    test: &DMatrix<f64>,
) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    match learner {
        Learner::Forest(cfg) => {
            if y.len() < 2 * cfg.min_leaf.max(1) {
                return Ok(None);
            }
            let cfg = ForestConfig {
                seed: rng::stream_key(&[cfg.seed, col as u64]),
                ..cfg.clone()
            };
            let model = fit_forest(train, y, &cfg)?;
            Ok(Some((predict_forest(&model, train)?, predict_forest(&model, test)?)))
        }
        Learner::RowMean => {
            if y.is_empty() {
                return Ok(None);
            }
            let base = row_means(train);
            let nf = y.len() as f64;
            let (mx, my) = (base.iter().sum::<f64>() / nf, y.iter().sum::<f64>() / nf);
            let sxx: f64 = base.iter().map(|b| (b - mx).powi(2)).sum();
            let sxy: f64 = base.iter().zip(y).map(|(b, v)| (b - mx) * (v - my)).sum();
            let slope = if sxx > 1e-12 * (1.0 + mx * mx) { sxy / sxx } else { 0.0 };
            let line = |b: &f64| my + slope * (b - mx);
            Ok(Some((base.iter().map(line).collect(), row_means(test).iter().map(line).collect())))
        }
    }
}

/// Iteratively regresses each incomplete year column on all other columns.
///
/// Missing cells start at their row mean. Each sweep visits incomplete
/// columns from fewest to most missing cells, refits the learner on the rows
/// where that column is observed and re-predicts its missing rows. The trace
/// records the in-sample error of the learners on observed cells per sweep.
///
/// A sweep whose training error exceeds the previous sweep's is discarded
/// and iteration stops, so the returned fills come from the last sweep that
/// improved the fit and the recorded loss never increases.
pub fn chained_impute(m: &PanelMatrix, cfg: &ChainedConfig) -> Result<ImputationResult> {
    cfg.validate()?;
    let mut filled = mean_impute(m)?.completed.values().clone();
    let (n, t) = (m.n_rows(), m.n_cols());
    let missing_in = |j: usize| (0..n).filter(|&i| !m.is_observed(i, j)).count();
    let mut order: Vec<usize> = (0..t).filter(|&j| missing_in(j) > 0).collect();
    order.sort_by_key(|&j| (missing_in(j), j));

    let mut trace = Vec::new();
    let mut iterations = 0;
    if t >= 2 && !order.is_empty() {
        for sweep in 1..=cfg.sweeps {
            let mut next = filled.clone();
            let (mut abs, mut sq, mut count) = (0.0, 0.0, 0usize);
            let mut change = 0.0f64;
            for &col in &order {
                let train_rows: Vec<usize> = (0..n).filter(|&i| m.is_observed(i, col)).collect();
                let test_rows: Vec<usize> = (0..n).filter(|&i| !m.is_observed(i, col)).collect();
                let y: Vec<f64> = train_rows.iter().map(|&i| m.values()[(i, col)]).collect();
                let train = drop_column(&next, &train_rows, col);
                let test = drop_column(&next, &test_rows, col);
                let Some((fitted, pred)) = fit_predict(&cfg.learner, col, &train, &y, &test)? else {
                    continue;
                };
                for (a, b) in y.iter().zip(&fitted) {
                    abs += (a - b).abs();
                    sq += (a - b) * (a - b);
                }
                count += y.len();
                for (&i, v) in test_rows.iter().zip(pred) {
                    change = change.max((next[(i, col)] - v).abs());
                    next[(i, col)] = v;
                }
            }
            if count == 0 {
                break;
            }
            let mse = sq / count as f64;
            if trace.last().is_some_and(|r: &TraceRow| mse > r.observed_mse) {
                break;
            }
            filled = next;
            iterations = sweep;
            trace.push(TraceRow {
                iter: sweep,
                observed_mae: abs / count as f64,
                observed_mse: mse,
                rank: None,
            });
            if change < cfg.tol {
                break;
            }
        }
    }
    if filled.iter().any(|v| !v.is_finite()) {
        return Err(ImputeError::NonFinite("chained imputation".into()));
    }
    Ok(ImputationResult {
        completed: m.with_values(filled)?,
        iterations,
        trace,
        method: Method::Chained,
        sigma_max: None,
        lambda: None,
    })
}
