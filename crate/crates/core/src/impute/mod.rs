//! Filling missing panel cells.
//!
//! Every imputer takes a [`PanelMatrix`] by reference and returns a new,
//! fully observed one inside an [`ImputationResult`].

mod chained;
pub mod forest;
mod soft;

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{PanelError, PanelMatrix};

pub use chained::{chained_impute, ChainedConfig, Learner};
pub use forest::{fit_forest, predict_forest, ForestConfig, ForestModel};
pub use soft::{soft_impute, soft_threshold, SoftImputeConfig};

#[derive(Debug, Error)]
pub enum ImputeError {
    #[error("no observed cells in row {0}")]
    NoObservedCells(String),
    #[error("row {0} has no observed cells")]
    EmptyRow(String),
    #[error("SVD failed to converge at iteration {0}")]
    SvdFailure(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("too few rows: {rows} < {needed}")]
    TooFewRows { rows: usize, needed: usize },
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Panel(#[from] PanelError),
}

pub type Result<T> = std::result::Result<T, ImputeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    SoftImpute,
    Mean,
    LinearInterp,
    Chained,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::SoftImpute => "softimpute",
            Method::Mean => "mean",
            Method::LinearInterp => "interp",
            Method::Chained => "chained",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "softimpute" | "soft" => Ok(Method::SoftImpute),
            "mean" => Ok(Method::Mean),
            "interp" | "linear" | "linearinterp" => Ok(Method::LinearInterp),
            "chained" | "mice" => Ok(Method::Chained),
            other => Err(format!("unknown imputation method `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub observed_mae: f64,
    pub observed_mse: f64,
    /// Post-threshold rank; not defined for every method.
    pub rank: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ImputationResult {
    pub completed: PanelMatrix,
    pub iterations: usize,
    pub trace: Vec<TraceRow>,
    pub method: Method,
    /// SoftImpute only: largest singular value of the initial fill.
    pub sigma_max: Option<f64>,
    /// SoftImpute only: the resolved penalty.
    pub lambda: Option<f64>,
}

impl ImputationResult {
    /// `iter,observed_mae,rank`
    pub fn write_trace_csv<W: Write>(&self, writer: W) -> std::result::Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["iter", "observed_mae", "rank"])?;
        for row in &self.trace {
            w.write_record([
                row.iter.to_string(),
                format!("{:.6}", row.observed_mae),
                row.rank.map(|r| r.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Human-readable progress lines, one per iteration.
    pub fn log_lines(&self) -> Vec<String> {
        let tag = match self.method {
            Method::SoftImpute => "SoftImpute",
            Method::Mean => "Mean",
            Method::LinearInterp => "LinearInterp",
            Method::Chained => "Chained",
        };
        let mut out = Vec::new();
        if let Some(s) = self.sigma_max {
            out.push(format!("[{tag}] Max Singular Value of X_init = {s:.6}"));
        }
        for row in &self.trace {
            match row.rank {
                Some(r) => out.push(format!(
                    "[{tag}] Iter {}: observed MAE={:.6} rank={r}",
                    row.iter, row.observed_mae
                )),
                None => out.push(format!("[{tag}] Iter {}: observed MAE={:.6}", row.iter, row.observed_mae)),
            }
        }
        if let Some(l) = self.lambda {
            out.push(format!("[{tag}] Stopped after iteration {} for lambda={l:.6}", self.iterations));
        }
        out
    }
}

/// Per-method settings for [`impute`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImputeSettings {
    pub soft: SoftImputeConfig,
    pub chained: ChainedConfig,
}

impl ImputeSettings {
    /// Returns a copy whose randomised learners draw from `seed`.
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut out = self.clone();
        if let Learner::Forest(f) = &mut out.chained.learner {
            f.seed = seed;
        }
        out
    }
}

/// Runs `method` on `m` with the matching block of `settings`.
pub fn impute(m: &PanelMatrix, method: Method, settings: &ImputeSettings) -> Result<ImputationResult> {
    match method {
        Method::SoftImpute => soft_impute(m, &settings.soft),
        Method::Mean => mean_impute(m),
        Method::LinearInterp => linear_interpolate(m),
        Method::Chained => chained_impute(m, &settings.chained),
    }
}

fn require_rows_observed(m: &PanelMatrix, err: fn(String) -> ImputeError) -> Result<()> {
    for i in 0..m.n_rows() {
        if (0..m.n_cols()).all(|j| !m.is_observed(i, j)) {
            return Err(err(m.entities()[i].to_string()));
        }
    }
    Ok(())
}

fn finish(m: &PanelMatrix, filled: DMatrix<f64>, method: Method) -> Result<ImputationResult> {
    Ok(ImputationResult {
        completed: m.with_values(filled)?,
        iterations: 1,
        trace: Vec::new(),
        method,
        sigma_max: None,
        lambda: None,
    })
}

/// Each missing cell receives its row's mean over observed cells.
pub fn mean_impute(m: &PanelMatrix) -> Result<ImputationResult> {
    require_rows_observed(m, ImputeError::EmptyRow)?;
    let mut filled = m.values().clone();
    for i in 0..m.n_rows() {
        let obs = m.row_observed(i);
        let mean = obs.iter().map(|(_, v)| v).sum::<f64>() / obs.len() as f64;
        for j in 0..m.n_cols() {
            if !m.is_observed(i, j) {
                filled[(i, j)] = mean;
            }
        }
    }
    finish(m, filled, Method::Mean)
}

/// Straight-line fill between the nearest observed neighbours in year order;
/// leading and trailing gaps repeat the nearest observation.
pub fn linear_interpolate(m: &PanelMatrix) -> Result<ImputationResult> {
    require_rows_observed(m, ImputeError::EmptyRow)?;
    let years = m.years();
    let mut filled = m.values().clone();
    for i in 0..m.n_rows() {
        let obs = m.row_observed(i);
        for j in 0..m.n_cols() {
            if m.is_observed(i, j) {
                continue;
            }
            let after = obs.partition_point(|&(k, _)| k < j);
            filled[(i, j)] = match (after.checked_sub(1).map(|b| obs[b]), obs.get(after)) {
                (Some((k0, v0)), Some(&(k1, v1))) => {
                    let (t0, t1, t) = (years[k0] as f64, years[k1] as f64, years[j] as f64);
                    v0 + (v1 - v0) * (t - t0) / (t1 - t0)
                }
                (Some((_, v)), None) | (None, Some(&(_, v))) => v,
                (None, None) => unreachable!("row has an observation"),
            };
        }
    }
    finish(m, filled, Method::LinearInterp)
}
