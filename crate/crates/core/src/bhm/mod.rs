//! Hierarchical panel regression
//! `y_it = β₀ + Σ_k β_k·x_k,it + γ_i + δ_t + ε_it`, `ε ~ N(0, σ²)`,
//! fitted by blocked Gibbs sampling or by mean-field variational inference.
//!
//! Entity effects `γ` and year effects `δ` have zero-mean Normal priors and,
//! by default, are constrained to sum to zero so the intercept is
//! identified. `σ` has a half-Normal prior.

mod diagnostics;
mod gibbs;
mod vi;

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{fmt_f64, PanelError, PanelMatrix};

pub use diagnostics::{ess, ess_of, rhat, rhat_of};
pub use gibbs::{fit_mcmc, McmcConfig};
pub use vi::{fit_vi, GaussianFactor, ViApprox, ViConfig};

#[derive(Debug, Error)]
pub enum BhmError {
    #[error("non-finite likelihood: {0}")]
    NonFiniteLikelihood(String),
    #[error("ELBO diverged at iteration {0}")]
    ElboDiverged(usize),
    #[error("insufficient draws: {0}")]
    InsufficientDraws(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("design has missing cells: {0}")]
    IncompleteDesign(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, BhmError>;

/// Prior hyperparameters and model switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BhmSpec {
    /// Prior mean shared by the intercept and slopes.
    pub prior_beta_mean: f64,
    pub prior_beta_sd: f64,
    pub prior_gamma_sd: f64,
    pub prior_delta_sd: f64,
    /// Half-Normal scale for σ; `None` uses `2.5·sd(y)`.
    pub prior_sigma_scale: Option<f64>,
    pub sum_to_zero_gamma: bool,
    pub sum_to_zero_delta: bool,
    pub include_gamma: bool,
    pub include_delta: bool,
    /// Hold σ at this value instead of sampling it.
    pub fixed_sigma: Option<f64>,
}

impl Default for BhmSpec {
    fn default() -> Self {
        BhmSpec {
            prior_beta_mean: 0.0,
            prior_beta_sd: 10.0,
            prior_gamma_sd: 2.5,
            prior_delta_sd: 2.5,
            prior_sigma_scale: None,
            sum_to_zero_gamma: true,
            sum_to_zero_delta: true,
            include_gamma: true,
            include_delta: true,
            fixed_sigma: None,
        }
    }
}

impl BhmSpec {
    /// Weakly informative priors on the scale of `data`: the intercept prior
    /// is centred on `mean(y)`, and every scale is a multiple of `sd(y)`.
    pub fn scaled_to(data: &BhmData) -> Self {
        let (mean, sd) = mean_sd(&data.y);
        let sd = if sd > 0.0 { sd } else { mean.abs().max(1.0) };
        BhmSpec {
            prior_beta_mean: mean,
            prior_beta_sd: 10.0 * sd,
            prior_gamma_sd: 2.5 * sd,
            prior_delta_sd: 2.5 * sd,
            ..BhmSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("prior_beta_sd", self.prior_beta_sd),
            ("prior_gamma_sd", self.prior_gamma_sd),
            ("prior_delta_sd", self.prior_delta_sd),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(BhmError::InvalidSpec(format!("{name} must be > 0")));
            }
        }
        if !self.prior_beta_mean.is_finite() {
            return Err(BhmError::InvalidSpec("prior_beta_mean must be finite".into()));
        }
        for (name, v) in [("prior_sigma_scale", self.prior_sigma_scale), ("fixed_sigma", self.fixed_sigma)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(BhmError::InvalidSpec(format!("{name} must be > 0")));
                }
            }
        }
        Ok(())
    }
}

/// Long-format design: one row per observed (entity, year) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BhmData {
    pub y: Vec<f64>,
    /// Covariates only (n × p); the intercept is implicit.
    pub x: DMatrix<f64>,
    pub group: Vec<usize>,
    pub time: Vec<usize>,
    pub group_names: Vec<String>,
    pub time_labels: Vec<i32>,
    pub covariate_names: Vec<String>,
}

impl BhmData {
    pub fn new(
        y: Vec<f64>,
        x: DMatrix<f64>,
        group: Vec<usize>,
        time: Vec<usize>,
        group_names: Vec<String>,
        time_labels: Vec<i32>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(BhmError::ShapeMismatch("no observations".into()));
        }
        if x.nrows() != n || group.len() != n || time.len() != n {
            return Err(BhmError::ShapeMismatch("y, x, group and time lengths differ".into()));
        }
        if covariate_names.len() != x.ncols() {
            return Err(BhmError::ShapeMismatch("covariate names vs columns".into()));
        }
        if group.iter().any(|&g| g >= group_names.len()) || time.iter().any(|&t| t >= time_labels.len()) {
            return Err(BhmError::ShapeMismatch("group or time index out of range".into()));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(BhmError::NonFiniteLikelihood("non-finite data".into()));
        }
        Ok(BhmData {
            y,
            x,
            group,
            time,
            group_names,
            time_labels,
            covariate_names,
        })
    }

    /// Stacks a fully observed outcome panel and aligned covariate panels.
    pub fn from_panel(y: &PanelMatrix, covariates: &[(String, PanelMatrix)]) -> Result<Self> {
        if !y.is_complete() {
            return Err(BhmError::IncompleteDesign("outcome panel".into()));
        }
        for (name, c) in covariates {
            if !c.is_complete() {
                return Err(BhmError::IncompleteDesign(format!("covariate {name}")));
            }
            if c.entities() != y.entities() || c.years() != y.years() {
                return Err(BhmError::ShapeMismatch(format!("covariate {name} is not aligned with the outcome")));
            }
        }
        let (rows, cols) = (y.n_rows(), y.n_cols());
        let n = rows * cols;
        let mut yy = Vec::with_capacity(n);
        let mut group = Vec::with_capacity(n);
        let mut time = Vec::with_capacity(n);
        for i in 0..rows {
            for j in 0..cols {
                yy.push(y.values()[(i, j)]);
                group.push(i);
                time.push(j);
            }
        }
        let x = DMatrix::from_fn(n, covariates.len(), |r, k| covariates[k].1.values()[(r / cols, r % cols)]);
        BhmData::new(
            yy,
            x,
            group,
            time,
            y.entities().iter().map(|e| e.to_string()).collect(),
            y.years().to_vec(),
            covariates.iter().map(|(n, _)| n.clone()).collect(),
        )
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_groups(&self) -> usize {
        self.group_names.len()
    }

    pub fn n_times(&self) -> usize {
        self.time_labels.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }
}

pub(crate) fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Effect {
    Off,
    Free,
    SumZero,
}

impl Effect {
    fn of(include: bool, sum_zero: bool) -> Self {
        match (include, sum_zero) {
            (false, _) => Effect::Off,
            (true, false) => Effect::Free,
            (true, true) => Effect::SumZero,
        }
    }
}

/// Which parameter blocks a fit carries, and their names.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub q: usize,
    pub n_groups: usize,
    pub n_times: usize,
    pub gamma: Effect,
    pub delta: Effect,
    pub sigma_free: bool,
}

impl Layout {
    pub fn new(data: &BhmData, spec: &BhmSpec) -> Self {
        Layout {
            q: 1 + data.n_covariates(),
            n_groups: data.n_groups(),
            n_times: data.n_times(),
            gamma: Effect::of(spec.include_gamma, spec.sum_to_zero_gamma),
            delta: Effect::of(spec.include_delta, spec.sum_to_zero_delta),
            sigma_free: spec.fixed_sigma.is_none(),
        }
    }

    /// Names of the natural-scale parameters in draw order.
    pub fn names(&self, data: &BhmData) -> Vec<String> {
        let mut names: Vec<String> = (0..self.q).map(|k| format!("beta{k}")).collect();
        if self.gamma != Effect::Off {
            names.extend(data.group_names.iter().map(|g| format!("gamma[{g}]")));
        }
        if self.delta != Effect::Off {
            names.extend(data.time_labels.iter().map(|t| format!("delta[{t}]")));
        }
        names.push("sigma".into());
        names
    }
}

/// Posterior draws from [`fit_mcmc`]; one `n_kept × n_params` matrix per chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub names: Vec<String>,
    pub chains: Vec<DMatrix<f64>>,
    pub warmup: usize,
    pub thin: usize,
    pub seed: u64,
    /// Non-fatal conditions noticed while fitting, e.g. a rank-deficient design.
    pub warnings: Vec<String>,
    /// Fraction of σ proposals accepted, per chain.
    pub sigma_acceptance: Vec<f64>,
}

impl PosteriorSamples {
    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn n_kept(&self) -> usize {
        self.chains.first().map_or(0, |c| c.nrows())
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| BhmError::UnknownParameter(name.to_string()))
    }

    /// Draws of one parameter, one vector per chain.
    pub fn param(&self, name: &str) -> Result<Vec<Vec<f64>>> {
        let k = self.index_of(name)?;
        Ok(self.chains.iter().map(|c| c.column(k).iter().copied().collect()).collect())
    }

    /// Draws of one parameter pooled across chains.
    pub fn pooled(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.param(name)?.concat())
    }

    /// Long CSV `chain,iter,param,value`.
    pub fn write_draws_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["chain", "iter", "param", "value"])?;
        for (c, chain) in self.chains.iter().enumerate() {
            for it in 0..chain.nrows() {
                for (k, name) in self.names.iter().enumerate() {
                    w.write_record([c.to_string(), it.to_string(), name.clone(), fmt_f64(chain[(it, k)])])?;
                }
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub param: String,
    pub mean: f64,
    pub sd: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
    pub rhat: Option<f64>,
    pub ess: Option<f64>,
}

/// Quantile by linear interpolation between order statistics
/// (position `(n − 1)·p` in the sorted sample).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean, sd and 5/50/95% quantiles of a sample.
pub fn summarize_draws(name: &str, draws: &[f64]) -> ParamSummary {
    let (mean, sd) = mean_sd(draws);
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    ParamSummary {
        param: name.to_string(),
        mean,
        sd,
        q05: quantile_sorted(&sorted, 0.05),
        q50: quantile_sorted(&sorted, 0.5),
        q95: quantile_sorted(&sorted, 0.95),
        rhat: None,
        ess: None,
    }
}

/// Anything that can be summarised per parameter.
pub trait Posterior {
    fn summary(&self) -> Vec<ParamSummary>;
}

impl Posterior for PosteriorSamples {
    /// Pooled-draw summaries, with R̂ and bulk ESS when there are at least two
    /// chains of at least ten draws.
    fn summary(&self) -> Vec<ParamSummary> {
        self.names
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let chains: Vec<Vec<f64>> = self.chains.iter().map(|c| c.column(k).iter().copied().collect()).collect();
                let mut s = summarize_draws(name, &chains.concat());
                s.rhat = rhat_of(&chains).ok();
                s.ess = ess_of(&chains).ok();
                s
            })
            .collect()
    }
}

pub fn posterior_summary<P: Posterior + ?Sized>(posterior: &P) -> Vec<ParamSummary> {
    posterior.summary()
}

/// CSV `param,mean,sd,q05,q50,q95,rhat,ess`.
pub fn write_summary_csv<W: Write>(rows: &[ParamSummary], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["param", "mean", "sd", "q05", "q50", "q95", "rhat", "ess"])?;
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.param.clone(),
            fmt_f64(r.mean),
            fmt_f64(r.sd),
            fmt_f64(r.q05),
            fmt_f64(r.q50),
            fmt_f64(r.q95),
            opt(r.rhat),
            opt(r.ess),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Orthonormal basis (n × (n−1)) of the vectors summing to zero.
pub(crate) fn sum_zero_basis(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n.saturating_sub(1), |i, k| {
        let k1 = (k + 1) as f64;
        let norm = (k1 * (k1 + 1.0)).sqrt();
        if i <= k {
            1.0 / norm
        } else if i == k + 1 {
            -k1 / norm
        } else {
            0.0
        }
    })
}
