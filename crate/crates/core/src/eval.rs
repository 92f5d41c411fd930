//! Validation harness: error metrics, imputer comparisons under injected
//! missingness, and the on-disk report bundle.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bhm::{write_summary_csv, ParamSummary};
use crate::impute::{self, ImputationResult, ImputeSettings, Method};
use crate::panel::{fmt_f64, PanelError, PanelMatrix, Sector};
use crate::rng;
use crate::sparse_reg::LassoReport;
use crate::synth::{inject_missing, Mechanism, MissingnessSpec, SynthError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {truth} true values vs {pred} predictions")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("metrics need at least one value")]
    Empty,
    #[error("R² is undefined for a constant truth vector")]
    ConstantTruth,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("report has no stage artifacts")]
    NoStages,
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Stage(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub rmse: f64,
    pub mae: f64,
    pub mse: f64,
    /// `None` when the truth vector is constant.
    pub r2: Option<f64>,
    pub bic: Option<f64>,
}

impl MetricSet {
    /// All-zero errors, as for a comparison over no cells.
    pub fn zero() -> Self {
        MetricSet { rmse: 0.0, mae: 0.0, mse: 0.0, r2: None, bic: None }
    }
}

fn check_lengths(y_true: &[f64], y_pred: &[f64]) -> Result<()> {
    if y_true.len() != y_pred.len() {
        return Err(EvalError::LengthMismatch { truth: y_true.len(), pred: y_pred.len() });
    }
    if y_true.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// Coefficient of determination `1 − SS_res/SS_tot`. Negative values are
/// returned unclamped.
pub fn r_squared(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_lengths(y_true, y_pred)?;
    let mean = y_true.iter().sum::<f64>() / y_true.len() as f64;
    let ss_tot: f64 = y_true.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(EvalError::ConstantTruth);
    }
    let ss_res: f64 = y_true.iter().zip(y_pred).map(|(y, p)| (y - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// RMSE, MAE, MSE and R² of `y_pred` against `y_true`; `bic` is left unset.
pub fn metrics(y_true: &[f64], y_pred: &[f64]) -> Result<MetricSet> {
    check_lengths(y_true, y_pred)?;
    let n = y_true.len() as f64;
    let (mut sse, mut sae) = (0.0, 0.0);
    for (y, p) in y_true.iter().zip(y_pred) {
        let e = y - p;
        sse += e * e;
        sae += e.abs();
    }
    let mse = sse / n;
    let rmse = mse.sqrt();
    // guard against rounding putting MAE a hair above RMSE
    let mae = (sae / n).min(rmse);
    let r2 = match r_squared(y_true, y_pred) {
        Ok(r) => Some(r),
        Err(EvalError::ConstantTruth) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricSet { rmse, mae, mse, r2, bic: None })
}

/// Bayesian information criterion `k·ln n − 2·loglik`.
pub fn bic(loglik: f64, n: usize, n_params: usize) -> Result<f64> {
    if n == 0 {
        return Err(EvalError::InvalidArgument("BIC needs n >= 1".into()));
    }
    Ok(n_params as f64 * (n as f64).ln() - 2.0 * loglik)
}

/// Parameter count used for the hierarchical model's BIC: the location
/// parameters only (intercept, slopes, and the free effect coordinates).
///
/// This is a convention: effective parameter counts for random effects are
/// not well defined, and the variance parameters are left out.
pub fn bhm_param_count(n_covariates: usize, n_groups: usize, n_times: usize, sum_to_zero: bool) -> usize {
    let drop = usize::from(sum_to_zero);
    1 + n_covariates + n_groups.saturating_sub(drop) + n_times.saturating_sub(drop)
}

/// One (mechanism, fraction, method, replication) cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mechanism: Mechanism,
    pub fraction: f64,
    pub method: Method,
    pub rep: usize,
    /// Seed of the mask shared by every method in this replication.
    pub seed: u64,
    pub masked_cells: usize,
    pub metrics: Option<MetricSet>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub mechanism: Mechanism,
    pub fraction: f64,
    pub method: Method,
    pub median_rmse: Option<f64>,
    pub mean_rmse: Option<f64>,
    pub n_ok: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub reps: usize,
}

impl SweepReport {
    /// Long format `mechanism,fraction,method,rep,rmse,mae,r2`; metrics of
    /// failed cells are left empty.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["mechanism", "fraction", "method", "rep", "rmse", "mae", "r2"])?;
        for r in &self.rows {
            let (rmse, mae, r2) = match &r.metrics {
                Some(m) => (fmt_f64(m.rmse), fmt_f64(m.mae), m.r2.map(fmt_f64).unwrap_or_default()),
                None => Default::default(),
            };
            w.write_record([
                r.mechanism.as_str().to_string(),
                fmt_f64(r.fraction),
                r.method.as_str().to_string(),
                r.rep.to_string(),
                rmse,
                mae,
                r2,
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// RMSE of every successful replication of one grid cell.
    pub fn rmses(&self, mechanism: Mechanism, fraction: f64, method: Method) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.mechanism == mechanism && r.fraction == fraction && r.method == method)
            .filter_map(|r| r.metrics.map(|m| m.rmse))
            .collect()
    }

    pub fn median_rmse(&self, mechanism: Mechanism, fraction: f64, method: Method) -> Option<f64> {
        median(self.rmses(mechanism, fraction, method))
    }

    /// One aggregated row per (mechanism, fraction, method), in first-seen order.
    pub fn summary(&self) -> Vec<SweepSummary> {
        let mut keys: Vec<(Mechanism, f64, Method)> = Vec::new();
        for r in &self.rows {
            let k = (r.mechanism, r.fraction, r.method);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys.into_iter()
            .map(|(mechanism, fraction, method)| {
                let rmses = self.rmses(mechanism, fraction, method);
                let total = self
                    .rows
                    .iter()
                    .filter(|r| r.mechanism == mechanism && r.fraction == fraction && r.method == method)
                    .count();
                let mean_rmse = (!rmses.is_empty()).then(|| rmses.iter().sum::<f64>() / rmses.len() as f64);
                SweepSummary {
                    mechanism,
                    fraction,
                    method,
                    n_ok: rmses.len(),
                    n_failed: total - rmses.len(),
                    mean_rmse,
                    median_rmse: median(rmses),
                }
            })
            .collect()
    }
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) })
}

/// Default sweep grid: 10% to 60% missing in steps of 10%.
pub const DEFAULT_FRACTIONS: [f64; 6] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
pub const DEFAULT_REPS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub mechanisms: Vec<Mechanism>,
    pub fractions: Vec<f64>,
    pub methods: Vec<Method>,
    pub reps: usize,
    pub seed: u64,
    pub settings: ImputeSettings,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            mechanisms: vec![Mechanism::Mcar],
            fractions: DEFAULT_FRACTIONS.to_vec(),
            methods: vec![Method::SoftImpute, Method::Mean],
            reps: DEFAULT_REPS,
            seed: 0,
            settings: ImputeSettings::default(),
        }
    }
}

fn mask_seed(seed: u64, mechanism: Mechanism, fraction: f64, rep: usize) -> u64 {
    rng::stream_key(&[seed, rng::label_tag(mechanism.as_str()), fraction.to_bits(), rep as u64])
}

fn method_seed(seed: u64, mechanism: Mechanism, fraction: f64, method: Method, rep: usize) -> u64 {
    rng::stream_key(&[
        seed,
        rng::label_tag(mechanism.as_str()),
        fraction.to_bits(),
        rng::label_tag(method.as_str()),
        rep as u64,
    ])
}

/// Imputed-versus-true comparison over the cells observed in `truth` but
/// missing in `masked`.
fn score_masked(truth: &PanelMatrix, masked: &PanelMatrix, completed: &PanelMatrix) -> Result<(usize, MetricSet)> {
    let (mut t, mut p) = (Vec::new(), Vec::new());
    for i in 0..truth.n_rows() {
        for j in 0..truth.n_cols() {
            if truth.is_observed(i, j) && !masked.is_observed(i, j) {
                t.push(truth.values()[(i, j)]);
                p.push(completed.values()[(i, j)]);
            }
        }
    }
    if t.is_empty() {
        return Ok((0, MetricSet::zero()));
    }
    Ok((t.len(), metrics(&t, &p)?))
}

fn run_replication(
    panel: &PanelMatrix,
    mechanism: Mechanism,
    fraction: f64,
    rep: usize,
    methods: &[Method],
    settings: &ImputeSettings,
    seed: u64,
) -> Vec<SweepRow> {
    let mseed = mask_seed(seed, mechanism, fraction, rep);
    let row = |method, masked_cells, outcome: std::result::Result<MetricSet, String>| SweepRow {
        mechanism,
        fraction,
        method,
        rep,
        seed: mseed,
        masked_cells,
        metrics: outcome.as_ref().ok().copied(),
        error: outcome.err(),
    };
    let masked = match inject_missing(panel, &MissingnessSpec { mechanism, fraction, seed: mseed }) {
        Ok(m) => m,
        Err(e) => return methods.iter().map(|&m| row(m, 0, Err(e.to_string()))).collect(),
    };
    let masked_cells = panel.observed_count() - masked.observed_count();
    methods
        .iter()
        .map(|&method| {
            let local = settings.reseeded(method_seed(seed, mechanism, fraction, method, rep));
            let outcome = impute::impute(&masked, method, &local)
                .map_err(|e| e.to_string())
                .and_then(|res| {
                    score_masked(panel, &masked, &res.completed)
                        .map(|(_, m)| m)
                        .map_err(|e| e.to_string())
                });
            row(method, masked_cells, outcome)
        })
        .collect()
}

fn check_panel(panel: &PanelMatrix, methods: &[Method]) -> Result<()> {
    if methods.is_empty() {
        return Err(EvalError::InvalidArgument("no imputation methods given".into()));
    }
    if panel.observed_count() == 0 {
        return Err(EvalError::InvalidArgument("panel has no observed cells to score against".into()));
    }
    Ok(())
}

/// Masks cells of `panel` per `spec` and scores each method on the masked
/// cells only. Every method sees the same mask within a replication.
///
/// Cells already missing in `panel` are never scored. Replication `r` masks
/// with a seed derived from `spec.seed`, the mechanism, the fraction and `r`,
/// so results do not depend on thread scheduling. Imputer failures are
/// recorded in the row instead of aborting.
pub fn compare_imputers(
    panel: &PanelMatrix,
    spec: &MissingnessSpec,
    methods: &[Method],
    settings: &ImputeSettings,
    reps: usize,
) -> Result<SweepReport> {
    missingness_sweep(
        panel,
        &SweepConfig {
            mechanisms: vec![spec.mechanism],
            fractions: vec![spec.fraction],
            methods: methods.to_vec(),
            reps,
            seed: spec.seed,
            settings: settings.clone(),
        },
    )
}

/// Full factorial sweep over mechanisms × fractions × replications, with
/// every method run in each cell. Cells run in parallel; rows come back in
/// grid order.
pub fn missingness_sweep(panel: &PanelMatrix, cfg: &SweepConfig) -> Result<SweepReport> {
    check_panel(panel, &cfg.methods)?;
    if cfg.mechanisms.is_empty() || cfg.fractions.is_empty() {
        return Err(EvalError::InvalidArgument("sweep grid is empty".into()));
    }
    if cfg.reps == 0 {
        return Err(EvalError::InvalidArgument("reps must be >= 1".into()));
    }
    if let Some(f) = cfg.fractions.iter().find(|f| !(0.0..1.0).contains(*f)) {
        return Err(EvalError::InvalidArgument(format!("fraction {f} outside [0, 1)")));
    }
    let cells: Vec<(Mechanism, f64, usize)> = cfg
        .mechanisms
        .iter()
        .flat_map(|&m| cfg.fractions.iter().flat_map(move |&f| (0..cfg.reps).map(move |r| (m, f, r))))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(m, f, r)| run_replication(panel, m, f, r, &cfg.methods, &cfg.settings, cfg.seed))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    Ok(SweepReport { rows, reps: cfg.reps })
}

/// A regression design assembled from a panel.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionData {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub predictors: Vec<String>,
}

/// One observation per (country, year): `target` regressed on the other
/// sectors present for every country. Missing cells are an error, so pass
/// an imputed panel.
pub fn sector_design(panel: &PanelMatrix, target: Sector) -> Result<RegressionData> {
    if !panel.is_complete() {
        return Err(EvalError::InvalidArgument("sector regression needs a fully observed panel".into()));
    }
    let mut by_country: BTreeMap<&str, BTreeMap<Sector, usize>> = BTreeMap::new();
    for (i, e) in panel.entities().iter().enumerate() {
        by_country.entry(e.country.as_str()).or_default().insert(e.sector, i);
    }
    if by_country.values().any(|s| !s.contains_key(&target)) {
        return Err(EvalError::InvalidArgument(format!("some country lacks the target sector {target}")));
    }
    let predictors: Vec<Sector> = Sector::ALL
        .into_iter()
        .filter(|&s| s != target && by_country.values().all(|m| m.contains_key(&s)))
        .collect();
    if predictors.is_empty() {
        return Err(EvalError::InvalidArgument(format!("no predictor sectors besides {target}")));
    }
    let t = panel.n_cols();
    let n = by_country.len() * t;
    let v = panel.values();
    let rows: Vec<&BTreeMap<Sector, usize>> = by_country.values().collect();
    let x = DMatrix::from_fn(n, predictors.len(), |r, k| v[(rows[r / t][&predictors[k]], r % t)]);
    let y = (0..n).map(|r| v[(rows[r / t][&target], r % t)]).collect();
    Ok(RegressionData { x, y, predictors: predictors.iter().map(|s| s.to_string()).collect() })
}

/// Every panel cell is one observation of the outcome; each covariate panel
/// supplies one column. Row order is row-major over the outcome panel.
pub fn covariate_design(outcome: &PanelMatrix, covariates: &[(String, PanelMatrix)]) -> Result<RegressionData> {
    if covariates.is_empty() {
        return Err(EvalError::InvalidArgument("no covariates".into()));
    }
    if !outcome.is_complete() {
        return Err(EvalError::InvalidArgument("outcome panel has missing cells".into()));
    }
    for (name, c) in covariates {
        if !c.is_complete() || c.entities() != outcome.entities() || c.years() != outcome.years() {
            return Err(EvalError::InvalidArgument(format!("covariate {name} is incomplete or misaligned")));
        }
    }
    let t = outcome.n_cols();
    let n = outcome.n_rows() * t;
    let x = DMatrix::from_fn(n, covariates.len(), |r, k| covariates[k].1.values()[(r / t, r % t)]);
    let y = (0..n).map(|r| outcome.values()[(r / t, r % t)]).collect();
    Ok(RegressionData { x, y, predictors: covariates.iter().map(|(n, _)| n.clone()).collect() })
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of several labelled inputs, each length-prefixed so that
/// concatenation boundaries cannot collide.
pub fn hash_inputs(parts: &[(&str, &[u8])]) -> String {
    let mut h = Sha256::new();
    for (label, bytes) in parts {
        for chunk in [label.as_bytes(), bytes] {
            h.update((chunk.len() as u64).to_le_bytes());
            h.update(chunk);
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Impute,
    Bhm,
    Lasso,
    Sweep,
}

impl StageKind {
    pub const ORDER: [StageKind; 4] = [StageKind::Impute, StageKind::Bhm, StageKind::Lasso, StageKind::Sweep];

    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::Impute => "impute",
            StageKind::Bhm => "bhm",
            StageKind::Lasso => "lasso",
            StageKind::Sweep => "sweep",
        }
    }
}

/// A completed stage: its output plus provenance.
#[derive(Debug, Clone)]
pub struct Stage<T> {
    pub output: T,
    /// Free-form method label, e.g. `softimpute` or `mcmc`.
    pub method: String,
    pub inputs_hash: String,
    pub seed: u64,
    pub wall_time: Duration,
}

#[derive(Debug, Clone, Default)]
pub struct RunArtifacts {
    pub pipeline: String,
    pub seed: u64,
    pub imputation: Option<Stage<ImputationResult>>,
    pub posterior: Option<Stage<Vec<ParamSummary>>>,
    pub lasso: Option<Stage<LassoReport>>,
    pub sweep: Option<Stage<SweepReport>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ok,
    Absent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: StageKind,
    pub status: StageStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inputs_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub outputs: Vec<OutputFile>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub pipeline: String,
    pub version: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
/// Wall-clock times live apart from the manifest so the rest of the bundle
/// stays byte-identical across runs.
pub const TIMINGS_FILE: &str = "timings.json";

struct BundleWriter {
    dir: PathBuf,
}

impl BundleWriter {
    fn put(&self, name: &str, bytes: &[u8]) -> Result<OutputFile> {
        fs::write(self.dir.join(name), bytes)?;
        Ok(OutputFile { file: name.to_string(), sha256: hash_bytes(bytes) })
    }
}

fn record<T>(kind: StageKind, stage: &Option<Stage<T>>, outputs: Vec<OutputFile>) -> StageRecord {
    match stage {
        Some(s) => StageRecord {
            stage: kind,
            status: StageStatus::Ok,
            method: Some(s.method.clone()),
            inputs_hash: Some(s.inputs_hash.clone()),
            seed: Some(s.seed),
            outputs,
        },
        None => StageRecord {
            stage: kind,
            status: StageStatus::Absent,
            method: None,
            inputs_hash: None,
            seed: None,
            outputs: Vec::new(),
        },
    }
}

/// Writes the report bundle into `dir` (created if needed) and returns the
/// manifest that was written.
///
/// Files: `imputation_trace.csv` and `imputed_panel.csv` (impute),
/// `posterior_summary.csv` (bhm), `lasso.json` (lasso), `sweep.csv` (sweep),
/// `manifest.json`, and `timings.json` with per-stage wall-clock seconds.
/// Stages without an artifact are listed as absent.
pub fn pipeline_report(dir: &Path, run: &RunArtifacts) -> Result<Manifest> {
    if run.imputation.is_none() && run.posterior.is_none() && run.lasso.is_none() && run.sweep.is_none() {
        return Err(EvalError::NoStages);
    }
    fs::create_dir_all(dir)?;
    let w = BundleWriter { dir: dir.to_path_buf() };
    let mut stages = Vec::new();
    let mut timings = BTreeMap::new();

    let mut outputs = Vec::new();
    if let Some(s) = &run.imputation {
        let mut buf = Vec::new();
        s.output.write_trace_csv(&mut buf)?;
        outputs.push(w.put("imputation_trace.csv", &buf)?);
        let mut buf = Vec::new();
        s.output.completed.write_long_csv(&mut buf)?;
        outputs.push(w.put("imputed_panel.csv", &buf)?);
        timings.insert("impute", s.wall_time.as_secs_f64());
    }
    stages.push(record(StageKind::Impute, &run.imputation, outputs));

    let mut outputs = Vec::new();
    if let Some(s) = &run.posterior {
        let mut buf = Vec::new();
        write_summary_csv(&s.output, &mut buf).map_err(|e| EvalError::Stage(e.to_string()))?;
        outputs.push(w.put("posterior_summary.csv", &buf)?);
        timings.insert("bhm", s.wall_time.as_secs_f64());
    }
    stages.push(record(StageKind::Bhm, &run.posterior, outputs));

    let mut outputs = Vec::new();
    if let Some(s) = &run.lasso {
        let mut buf = serde_json::to_vec_pretty(&s.output)?;
        buf.push(b'\n');
        outputs.push(w.put("lasso.json", &buf)?);
        timings.insert("lasso", s.wall_time.as_secs_f64());
    }
    stages.push(record(StageKind::Lasso, &run.lasso, outputs));

    let mut outputs = Vec::new();
    if let Some(s) = &run.sweep {
        let mut buf = Vec::new();
        s.output.write_csv(&mut buf)?;
        outputs.push(w.put("sweep.csv", &buf)?);
        timings.insert("sweep", s.wall_time.as_secs_f64());
    }
    stages.push(record(StageKind::Sweep, &run.sweep, outputs));

    let manifest = Manifest {
        pipeline: run.pipeline.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: run.seed,
        stages,
    };
    let mut buf = serde_json::to_vec_pretty(&manifest)?;
    buf.push(b'\n');
    w.put(MANIFEST_FILE, &buf)?;
    let mut buf = serde_json::to_vec_pretty(&timings)?;
    buf.push(b'\n');
    w.put(TIMINGS_FILE, &buf)?;
    Ok(manifest)
}
