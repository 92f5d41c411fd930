//! Command-line front end.
//!
//! Each subcommand reads CSV/JSON from disk, runs one stage (or a whole
//! pipeline) and writes its outputs together with a `manifest.json` that
//! records the inputs hash, seed and tool version. Settings resolve as
//! command-line flags over an optional JSON config file over defaults, and
//! the resolved settings are echoed to stderr as one JSON line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bhm::{
    self, fit_mcmc, fit_vi, posterior_summary, BhmData, BhmSpec, McmcConfig, ParamSummary, ViConfig,
};
use crate::eval::{
    self, covariate_design, hash_bytes, hash_inputs, missingness_sweep, pipeline_report, OutputFile, RegressionData,
    RunArtifacts, Stage, SweepConfig,
};
use crate::factor::{factor_scores, fit_em, FactorConfig};
use crate::impute::{self, ImputationResult, ImputeSettings, Method};
use crate::panel::{load_long_csv, summarize_shares, CsvSchema, LongRecord, PanelMatrix, Sector};
use crate::sparse_reg::{cv_lasso, fit_lasso, standardize, LassoReport, PathParams};
use crate::synth::{
    gen_hierarchical_panel, gen_levels_panel, gen_lowrank_panel, gen_sector_shares, inject_missing, HierConfig,
    Mechanism, MissingnessSpec, SynthConfig,
};
use crate::wb_client::{HttpTransport, ReplayTransport, Transport, WbClient, WbConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage { .. } => 1,
        }
    }

    /// One-line JSON description for stderr.
    pub fn to_json_line(&self) -> String {
        let v = match self {
            CliError::Config(m) => serde_json::json!({ "error": "config", "message": m }),
            CliError::Stage { stage, message } => {
                serde_json::json!({ "error": "stage", "stage": stage, "message": message })
            }
        };
        v.to_string()
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn stage_err<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> CliError {
    move |e| CliError::Stage { stage, message: e.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SimKind {
    /// GDP and sector value added built from share trajectories.
    #[default]
    Levels,
    /// Low-rank signal plus noise.
    Lowrank,
    /// Outcome with entity and year effects plus covariates.
    Hier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BhmMethod {
    #[default]
    Mcmc,
    Vi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FactorVariables {
    /// Observations are (country, year); variables are sectors.
    #[default]
    Sectors,
    /// Observations are years; variables are panel rows.
    Entities,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSource {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateSettings {
    pub kind: SimKind,
    pub synth: SynthConfig,
    pub hier: HierConfig,
    /// Optional missingness injected into the written panel.
    pub missing_fraction: f64,
    pub mechanism: Mechanism,
}

impl Default for SimulateSettings {
    fn default() -> Self {
        SimulateSettings {
            kind: SimKind::Levels,
            synth: SynthConfig::default(),
            hier: HierConfig::default(),
            missing_fraction: 0.0,
            mechanism: Mechanism::Mcar,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FetchSettings {
    pub countries: Vec<String>,
    pub year_start: i32,
    pub year_end: i32,
    pub client: WbConfig,
    /// Serve responses from recorded pages in this directory instead of
    /// the network.
    pub replay_dir: Option<PathBuf>,
}

impl Default for FetchSettings {
    fn default() -> Self {
        FetchSettings {
            countries: ["KEN", "NGA", "ZAF"].map(String::from).to_vec(),
            year_start: 1991,
            year_end: 2020,
            client: WbConfig::default(),
            replay_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImputeStage {
    pub method: Method,
    #[serde(flatten)]
    pub settings: ImputeSettings,
}

impl Default for ImputeStage {
    fn default() -> Self {
        ImputeStage { method: Method::SoftImpute, settings: ImputeSettings::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BhmStage {
    pub method: BhmMethod,
    /// Priors; when absent they are scaled to the outcome's mean and spread.
    pub spec: Option<BhmSpec>,
    pub mcmc: McmcConfig,
    pub vi: ViConfig,
}

impl Default for BhmStage {
    fn default() -> Self {
        BhmStage { method: BhmMethod::Mcmc, spec: None, mcmc: McmcConfig::default(), vi: ViConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LassoStage {
    /// Sector regressed on the other sectors when no covariates are given.
    pub target: Sector,
    pub cv_folds: usize,
    pub path: PathParams,
}

impl Default for LassoStage {
    fn default() -> Self {
        LassoStage { target: Sector::Gdp, cv_folds: 5, path: PathParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FactorStage {
    pub k: usize,
    pub variables: FactorVariables,
    pub em: FactorConfig,
}

impl Default for FactorStage {
    fn default() -> Self {
        FactorStage { k: 1, variables: FactorVariables::Sectors, em: FactorConfig::default() }
    }
}

/// Every setting a run can use. Loaded from JSON (missing keys take their
/// defaults) and then overridden by command-line flags.
///
/// Stage-level `seed` fields are overwritten by the run seed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub input: Option<PathBuf>,
    pub covariates: Vec<CovariateSource>,
    pub out: Option<PathBuf>,
    pub simulate: SimulateSettings,
    pub fetch: FetchSettings,
    pub impute: ImputeStage,
    pub bhm: BhmStage,
    pub lasso: LassoStage,
    pub factor: FactorStage,
    pub sweep: SweepConfig,
    /// Include the missingness sweep in the pipelines.
    pub pipeline_sweep: bool,
}


impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Pushes the run seed into every stage configuration.
    fn propagate_seed(&mut self) {
        let s = self.seed;
        self.simulate.synth.seed = s;
        self.simulate.hier.seed = s;
        self.bhm.mcmc.seed = s;
        self.bhm.vi.seed = s;
        self.factor.em.seed = s;
        self.sweep.seed = s;
        if let crate::impute::Learner::Forest(f) = &mut self.impute.settings.chained.learner {
            f.seed = s;
        }
    }

    /// Rejects parameter values no stage would accept, before any work starts.
    pub fn validate(&self) -> Result<()> {
        fn check<E: std::fmt::Display>(block: &str, r: std::result::Result<(), E>) -> Result<()> {
            r.map_err(|e| CliError::Config(format!("{block}: {e}")))
        }
        let bad = |block: &str, msg: &str| Err(CliError::Config(format!("{block}: {msg}")));
        let sim = &self.simulate;
        check("simulate", sim.synth.validate())?;
        if !(0.0..1.0).contains(&sim.missing_fraction) {
            return bad("simulate", "missing fraction must lie in [0, 1)");
        }
        if sim.hier.n_entities < 2 || sim.hier.n_years < 2 || !(sim.hier.sigma > 0.0) {
            return bad("simulate", "hierarchical panel needs >= 2 entities, >= 2 years and sigma > 0");
        }
        if self.fetch.year_start > self.fetch.year_end || self.fetch.countries.is_empty() {
            return bad("fetch", "need at least one country and year_start <= year_end");
        }
        for (block, settings) in [("impute", &self.impute.settings), ("sweep", &self.sweep.settings)] {
            check(block, settings.soft.validate())?;
            check(block, settings.chained.validate())?;
        }
        if let Some(spec) = &self.bhm.spec {
            check("bhm", spec.validate())?;
        }
        check("bhm", self.bhm.mcmc.validate())?;
        check("bhm", self.bhm.vi.validate())?;
        check("lasso", self.lasso.path.validate())?;
        if self.lasso.cv_folds < 2 {
            return bad("lasso", "cv_folds must be >= 2");
        }
        check("factor", self.factor.em.validate())?;
        if self.factor.k == 0 {
            return bad("factor", "k must be >= 1");
        }
        let sw = &self.sweep;
        if sw.reps == 0 || sw.methods.is_empty() || sw.mechanisms.is_empty() || sw.fractions.is_empty() {
            return bad("sweep", "reps >= 1 and non-empty mechanisms, methods and fractions required");
        }
        if sw.fractions.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return bad("sweep", "fractions must lie in (0, 1)");
        }
        Ok(())
    }

    fn input(&self) -> Result<&Path> {
        let p = self.input.as_deref().ok_or_else(|| CliError::Config("--input is required".into()))?;
        if !p.exists() {
            return Err(CliError::Config(format!("input file {} does not exist", p.display())));
        }
        Ok(p)
    }

    fn out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| CliError::Config("--out is required".into()))
    }

    fn check_covariates(&self) -> Result<()> {
        match self.covariates.iter().find(|c| !c.path.exists()) {
            Some(c) => Err(CliError::Config(format!("covariate file {} does not exist", c.path.display()))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sparsepanel", version, about = "Sparse country-sector-year panels: impute, model, select, evaluate")]
pub struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every random stage (default 0); echoed to stderr and manifests.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Only print errors (the resolved config line is still printed).
    #[arg(long, short, global = true, conflicts_with = "verbose")]
    pub quiet: bool,
    /// Print per-iteration progress.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic panel (and sector shares for the levels panel).
    Simulate(SimulateArgs),
    /// Download GDP and sector value added from the World Bank API.
    Fetch(FetchArgs),
    /// Fill the missing cells of a panel.
    Impute(ImputeArgs),
    /// Fit the hierarchical model with entity and year effects.
    FitBhm(FitBhmArgs),
    /// Cross-validated LASSO on a complete panel.
    Lasso(LassoArgs),
    /// Maximum-likelihood factor analysis by EM.
    Factor(FactorArgs),
    /// Score imputers on cells masked at several missingness levels.
    Sweep(SweepArgs),
    /// SoftImpute, then MCMC, then cross-validated LASSO; writes a report bundle.
    PipelineMcmc(PipelineArgs),
    /// As pipeline-mcmc with variational inference and a tighter SoftImpute tolerance.
    PipelineVi(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Number of countries.
    #[arg(long)]
    pub countries: Option<usize>,
    /// Inclusive year range, `START:END`.
    #[arg(long, value_parser = parse_years)]
    pub years: Option<(i32, i32)>,
    #[arg(long, value_enum)]
    pub kind: Option<SimKind>,
    /// Fraction of cells to blank out in the written panel.
    #[arg(long)]
    pub missing: Option<f64>,
    #[arg(long)]
    pub mechanism: Option<Mechanism>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FetchArgs {
    /// Comma-separated ISO3 country codes.
    #[arg(long, value_delimiter = ',')]
    pub countries: Option<Vec<String>>,
    /// Inclusive year range, `START:END`.
    #[arg(long, value_parser = parse_years)]
    pub years: Option<(i32, i32)>,
    /// Cache directory (default: $SPARSEPANEL_CACHE_DIR or .sparsepanel-cache).
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Use cached responses only.
    #[arg(long)]
    pub offline: bool,
    /// Serve responses from a directory of recorded pages.
    #[arg(long, hide = true)]
    pub replay: Option<PathBuf>,
    /// Output panel CSV (long format).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ImputeArgs {
    /// Panel CSV (long `country,sector,year,value` or wide `entity,<years>`).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// softimpute | mean | interp | chained
    #[arg(long)]
    pub method: Option<Method>,
    /// SoftImpute penalty as a fraction of the largest singular value.
    #[arg(long)]
    pub lambda_frac: Option<f64>,
    /// Absolute SoftImpute penalty (disables --lambda-frac).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Relative change in observed-cell MAE that ends SoftImpute.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitBhmArgs {
    /// Complete outcome panel CSV.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Covariate panel as NAME=PATH; repeatable.
    #[arg(long = "covariate", value_parser = parse_covariate)]
    pub covariates: Vec<CovariateSource>,
    #[arg(long, value_enum)]
    pub method: Option<BhmMethod>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Kept draws per chain.
    #[arg(long)]
    pub samples: Option<usize>,
    /// VI iterations.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LassoArgs {
    /// Complete panel CSV.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Sector to predict from the other sectors.
    #[arg(long)]
    pub target: Option<Sector>,
    /// Covariate panel as NAME=PATH; when given, the panel values are
    /// regressed on the covariates instead.
    #[arg(long = "covariate", value_parser = parse_covariate)]
    pub covariates: Vec<CovariateSource>,
    #[arg(long)]
    pub cv_folds: Option<usize>,
    /// Output JSON file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FactorArgs {
    /// Complete panel CSV.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Number of factors.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_enum)]
    pub variables: Option<FactorVariables>,
    /// Number of EM starts.
    #[arg(long)]
    pub starts: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Panel CSV; its observed cells are the ground truth.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Comma-separated: mcar, block, tail.
    #[arg(long, value_delimiter = ',')]
    pub mechanisms: Option<Vec<Mechanism>>,
    /// Comma-separated missing fractions.
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    /// Comma-separated: softimpute, mean, interp, chained.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Panel CSV with missing cells.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Covariate panel as NAME=PATH; repeatable.
    #[arg(long = "covariate", value_parser = parse_covariate)]
    pub covariates: Vec<CovariateSource>,
    /// LASSO target sector when no covariates are given.
    #[arg(long)]
    pub target: Option<Sector>,
    /// Also run the missingness sweep on the input panel.
    #[arg(long)]
    pub sweep: bool,
    /// Output directory for the report bundle.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_years(s: &str) -> std::result::Result<(i32, i32), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected START:END, got `{s}`"))?;
    let a: i32 = a.trim().parse().map_err(|_| format!("bad start year `{a}`"))?;
    let b: i32 = b.trim().parse().map_err(|_| format!("bad end year `{b}`"))?;
    if a > b {
        return Err(format!("start year {a} is after end year {b}"));
    }
    Ok((a, b))
}

fn parse_covariate(s: &str) -> std::result::Result<CovariateSource, String> {
    let (name, path) = s.split_once('=').ok_or_else(|| format!("expected NAME=PATH, got `{s}`"))?;
    if name.is_empty() {
        return Err("covariate name is empty".into());
    }
    Ok(CovariateSource { name: name.to_string(), path: PathBuf::from(path) })
}

/// stderr logging at three levels.
#[derive(Debug, Clone, Copy)]
pub struct Log {
    level: u8,
}

impl Log {
    pub fn new(quiet: bool, verbose: bool) -> Self {
        Log { level: if quiet { 0 } else if verbose { 2 } else { 1 } }
    }

    pub fn silent() -> Self {
        Log { level: 0 }
    }

    fn info(&self, msg: impl AsRef<str>) {
        if self.level >= 1 {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn debug(&self, msg: impl AsRef<str>) {
        if self.level >= 2 {
            eprintln!("{}", msg.as_ref());
        }
    }
}

/// Applies subcommand flags on top of `cfg`.
fn apply_flags(cfg: &mut RunConfig, cmd: &Command) {
    fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
        if let Some(v) = v {
            *slot = v.clone();
        }
    }
    fn set_opt<T: Clone>(slot: &mut Option<T>, v: &Option<T>) {
        if v.is_some() {
            *slot = v.clone();
        }
    }
    fn covs(cfg: &mut RunConfig, c: &[CovariateSource]) {
        if !c.is_empty() {
            cfg.covariates = c.to_vec();
        }
    }
    match cmd {
        Command::Simulate(a) => {
            set(&mut cfg.simulate.synth.n_countries, &a.countries);
            if let Some((y0, y1)) = a.years {
                cfg.simulate.synth.year_start = y0;
                cfg.simulate.synth.year_end = y1;
            }
            set(&mut cfg.simulate.kind, &a.kind);
            set(&mut cfg.simulate.missing_fraction, &a.missing);
            set(&mut cfg.simulate.mechanism, &a.mechanism);
            set_opt(&mut cfg.out, &a.out);
        }
        Command::Fetch(a) => {
            set(&mut cfg.fetch.countries, &a.countries);
            if let Some((y0, y1)) = a.years {
                cfg.fetch.year_start = y0;
                cfg.fetch.year_end = y1;
            }
            set(&mut cfg.fetch.client.cache_dir, &a.cache_dir);
            if a.offline {
                cfg.fetch.client.offline = true;
            }
            set_opt(&mut cfg.fetch.replay_dir, &a.replay);
            set_opt(&mut cfg.out, &a.out);
        }
        Command::Impute(a) => {
            set_opt(&mut cfg.input, &a.input);
            set(&mut cfg.impute.method, &a.method);
            let soft = &mut cfg.impute.settings.soft;
            if let Some(f) = a.lambda_frac {
                soft.lambda_as_fraction = Some(f);
            }
            if let Some(l) = a.lambda {
                soft.lambda = l;
                soft.lambda_as_fraction = None;
            }
            set(&mut soft.tol, &a.tol);
            set(&mut soft.max_iters, &a.max_iters);
            set_opt(&mut cfg.out, &a.out);
        }
        Command::FitBhm(a) => {
            set_opt(&mut cfg.input, &a.input);
            covs(cfg, &a.covariates);
            set(&mut cfg.bhm.method, &a.method);
            set(&mut cfg.bhm.mcmc.chains, &a.chains);
            set(&mut cfg.bhm.mcmc.warmup, &a.warmup);
            set(&mut cfg.bhm.mcmc.samples, &a.samples);
            set(&mut cfg.bhm.vi.iters, &a.iters);
            set_opt(&mut cfg.out, &a.out);
        }
        Command::Lasso(a) => {
            set_opt(&mut cfg.input, &a.input);
            covs(cfg, &a.covariates);
            set(&mut cfg.lasso.target, &a.target);
            set(&mut cfg.lasso.cv_folds, &a.cv_folds);
            set_opt(&mut cfg.out, &a.out);
        }
        Command::Factor(a) => {
            set_opt(&mut cfg.input, &a.input);
            set(&mut cfg.factor.k, &a.k);
            set(&mut cfg.factor.variables, &a.variables);
            set(&mut cfg.factor.em.n_starts, &a.starts);
            set_opt(&mut cfg.out, &a.out);
        }
        Command::Sweep(a) => {
            set_opt(&mut cfg.input, &a.input);
            set(&mut cfg.sweep.mechanisms, &a.mechanisms);
            set(&mut cfg.sweep.fractions, &a.fractions);
            set(&mut cfg.sweep.methods, &a.methods);
            set(&mut cfg.sweep.reps, &a.reps);
            set_opt(&mut cfg.out, &a.out);
        }
        Command::PipelineMcmc(a) | Command::PipelineVi(a) => {
            set_opt(&mut cfg.input, &a.input);
            covs(cfg, &a.covariates);
            set(&mut cfg.lasso.target, &a.target);
            if a.sweep {
                cfg.pipeline_sweep = true;
            }
            set_opt(&mut cfg.out, &a.out);
        }
    }
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Simulate(_) => "simulate",
        Command::Fetch(_) => "fetch",
        Command::Impute(_) => "impute",
        Command::FitBhm(_) => "fit-bhm",
        Command::Lasso(_) => "lasso",
        Command::Factor(_) => "factor",
        Command::Sweep(_) => "sweep",
        Command::PipelineMcmc(_) => "pipeline-mcmc",
        Command::PipelineVi(_) => "pipeline-vi",
    }
}

/// Resolves defaults, the config file and flags into one configuration.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_json_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    apply_flags(&mut cfg, &cli.command);
    cfg.propagate_seed();
    Ok(cfg)
}

/// Entry point shared by the binary: parses `args`, runs, and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            let first = first.trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::Config(first).to_json_line());
            return 2;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = resolve_config(cli)?;
    let name = command_name(&cli.command);
    if matches!(cli.command, Command::PipelineVi(_)) {
        cfg.bhm.method = BhmMethod::Vi;
        cfg.impute.settings.soft.tol /= VI_TOL_FACTOR;
    } else if matches!(cli.command, Command::PipelineMcmc(_)) {
        cfg.bhm.method = BhmMethod::Mcmc;
    }
    let echo = serde_json::json!({ "command": name, "seed": cfg.seed, "config": &cfg });
    eprintln!("config: {echo}");
    cfg.validate()?;
    let log = Log::new(cli.quiet, cli.verbose);
    match &cli.command {
        Command::Simulate(_) => cmd_simulate(&cfg, &log),
        Command::Fetch(_) => cmd_fetch(&cfg, &log),
        Command::Impute(_) => cmd_impute(&cfg, &log),
        Command::FitBhm(_) => cmd_fit_bhm(&cfg, &log),
        Command::Lasso(_) => cmd_lasso(&cfg, &log),
        Command::Factor(_) => cmd_factor(&cfg, &log),
        Command::Sweep(_) => cmd_sweep(&cfg, &log),
        Command::PipelineMcmc(_) => cmd_pipeline(&cfg, Pipeline::Mcmc, &log),
        Command::PipelineVi(_) => cmd_pipeline(&cfg, Pipeline::Vi, &log),
    }
}

/// The VI pipeline divides the SoftImpute tolerance by this factor.
pub const VI_TOL_FACTOR: f64 = 10.0;

/// Reads a long (`country,sector,year,value`) or wide (`entity,<years>`) CSV.
pub fn read_panel(path: &Path) -> std::result::Result<PanelMatrix, crate::panel::PanelError> {
    let text = fs::read_to_string(path)?;
    let first = text.lines().next().unwrap_or("");
    if first.split(',').next().map(str::trim) == Some("entity") {
        PanelMatrix::read_wide_csv(text.as_bytes())
    } else {
        crate::panel::to_wide_matrix(&load_long_csv(path, &CsvSchema::default())?)
    }
}

fn read_covariates(cfg: &RunConfig, stage: &'static str) -> Result<Vec<(String, PanelMatrix)>> {
    cfg.check_covariates()?;
    cfg.covariates
        .iter()
        .map(|c| Ok((c.name.clone(), read_panel(&c.path).map_err(stage_err(stage))?)))
        .collect()
}

fn file_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn covariate_bytes(cfg: &RunConfig) -> Result<Vec<(String, Vec<u8>)>> {
    cfg.covariates.iter().map(|c| Ok((format!("covariate:{}", c.name), file_bytes(&c.path)?))).collect()
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("config types serialise")
}

/// Provenance written next to the outputs of a single-stage command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub inputs_hash: String,
    pub outputs: Vec<OutputFile>,
}

struct Outputs {
    dir: PathBuf,
    files: Vec<OutputFile>,
}

impl Outputs {
    fn in_dir(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Outputs { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::Stage { stage: "output", message: format!("{}: {e}", path.display()) })?;
        self.files.push(OutputFile { file: name.to_string(), sha256: hash_bytes(bytes) });
        Ok(())
    }

    fn finish(self, manifest_name: &str, command: &str, seed: u64, inputs_hash: String) -> Result<()> {
        let m = CommandManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            inputs_hash,
            outputs: self.files,
        };
        let mut bytes = serde_json::to_vec_pretty(&m).map_err(stage_err("output"))?;
        bytes.push(b'\n');
        let path = self.dir.join(manifest_name);
        fs::write(&path, bytes).map_err(|e| CliError::Stage { stage: "output", message: format!("{}: {e}", path.display()) })
    }
}

/// For commands whose `--out` names a file: writes it plus
/// `<file>.manifest.json` beside it.
fn single_file_output(out: &Path, bytes: &[u8], command: &str, seed: u64, inputs_hash: String) -> Result<()> {
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = out
        .file_name()
        .ok_or_else(|| CliError::Config(format!("--out {} is not a file path", out.display())))?
        .to_string_lossy()
        .to_string();
    let mut o = Outputs::in_dir(dir)?;
    o.put(&name, bytes)?;
    o.finish(&format!("{name}.manifest.json"), command, seed, inputs_hash)
}

fn panel_long_csv(p: &PanelMatrix) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    p.write_long_csv(&mut buf).map_err(stage_err("output"))?;
    Ok(buf)
}

fn records_csv(records: &[LongRecord]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    crate::panel::write_long_csv(records, &mut buf).map_err(stage_err("output"))?;
    Ok(buf)
}

fn cmd_simulate(cfg: &RunConfig, log: &Log) -> Result<()> {
    let s = &cfg.simulate;
    let mut out = Outputs::in_dir(cfg.out()?)?;
    let inject = |p: PanelMatrix| -> Result<PanelMatrix> {
        if s.missing_fraction > 0.0 {
            let spec = MissingnessSpec { mechanism: s.mechanism, fraction: s.missing_fraction, seed: cfg.seed };
            inject_missing(&p, &spec).map_err(stage_err("simulate"))
        } else {
            Ok(p)
        }
    };
    match s.kind {
        SimKind::Levels => {
            let panel = inject(gen_levels_panel(&s.synth).map_err(stage_err("simulate"))?)?;
            out.put("panel.csv", &panel_long_csv(&panel)?)?;
            let shares = gen_sector_shares(&s.synth).map_err(stage_err("simulate"))?;
            let records: Vec<LongRecord> = shares.iter().flat_map(|sh| sh.to_long()).collect();
            out.put("shares.csv", &records_csv(&records)?)?;
            let summary = summarize_shares(&shares).map_err(stage_err("simulate"))?;
            let mut buf = Vec::new();
            {
                let mut w = csv::Writer::from_writer(&mut buf);
                w.write_record(["country", "sector", "mean", "std"]).map_err(stage_err("simulate"))?;
                for row in &summary {
                    for (sector, m) in [Sector::Agriculture, Sector::Industry, Sector::Services].iter().zip(row.by_sector()) {
                        w.write_record([row.country.clone(), sector.to_string(), format!("{:?}", m.mean), format!("{:?}", m.std)])
                            .map_err(stage_err("simulate"))?;
                    }
                }
                w.flush().map_err(stage_err("simulate"))?;
            }
            out.put("shares_summary.csv", &buf)?;
            for row in &summary {
                log.info(format!(
                    "{}: agriculture mean={:.6} std={:.6}",
                    row.country, row.agriculture.mean, row.agriculture.std
                ));
            }
        }
        SimKind::Lowrank => {
            let panel = inject(gen_lowrank_panel(&s.synth).map_err(stage_err("simulate"))?.panel)?;
            out.put("panel.csv", &panel_long_csv(&panel)?)?;
        }
        SimKind::Hier => {
            let h = gen_hierarchical_panel(&s.hier).map_err(stage_err("simulate"))?;
            out.put("panel.csv", &panel_long_csv(&inject(h.y)?)?)?;
            for (k, c) in h.covariates.iter().enumerate() {
                out.put(&format!("x{}.csv", k + 1), &panel_long_csv(c)?)?;
            }
            let mut truth = serde_json::to_vec_pretty(&h.truth).map_err(stage_err("simulate"))?;
            truth.push(b'\n');
            out.put("truth.json", &truth)?;
        }
    }
    let hash = hash_inputs(&[("simulate", &json(s))]);
    out.finish("manifest.json", "simulate", cfg.seed, hash)
}

fn cmd_fetch(cfg: &RunConfig, log: &Log) -> Result<()> {
    let f = &cfg.fetch;
    let out = cfg.out()?.to_path_buf();
    let panel = match &f.replay_dir {
        Some(dir) => fetch_with(ReplayTransport::new(dir), f)?,
        None => fetch_with(HttpTransport::default(), f)?,
    };
    log.info(format!(
        "fetched {} rows x {} years, {} cells missing",
        panel.n_rows(),
        panel.n_cols(),
        panel.n_rows() * panel.n_cols() - panel.observed_count()
    ));
    let hash = hash_inputs(&[("fetch", &json(&(&f.countries, f.year_start, f.year_end, &f.client.indicators)))]);
    single_file_output(&out, &panel_long_csv(&panel)?, "fetch", cfg.seed, hash)
}

fn fetch_with<T: Transport>(t: T, f: &FetchSettings) -> Result<PanelMatrix> {
    WbClient::new(t, f.client.clone())
        .fetch_panel(&f.countries, f.year_start, f.year_end)
        .map_err(stage_err("fetch"))
}

fn run_impute(panel: &PanelMatrix, stage: &ImputeStage, log: &Log) -> Result<ImputationResult> {
    let res = impute::impute(panel, stage.method, &stage.settings).map_err(stage_err("impute"))?;
    for line in res.log_lines() {
        log.debug(line);
    }
    log.info(format!("impute: {} finished after {} iteration(s)", stage.method.as_str(), res.iterations));
    Ok(res)
}

fn cmd_impute(cfg: &RunConfig, log: &Log) -> Result<()> {
    let input = cfg.input()?;
    let panel = read_panel(input).map_err(stage_err("impute"))?;
    let res = run_impute(&panel, &cfg.impute, log)?;
    let mut out = Outputs::in_dir(cfg.out()?)?;
    out.put("imputed_panel.csv", &panel_long_csv(&res.completed)?)?;
    let mut trace = Vec::new();
    res.write_trace_csv(&mut trace).map_err(stage_err("output"))?;
    out.put("imputation_trace.csv", &trace)?;
    let hash = hash_inputs(&[("panel", &file_bytes(input)?), ("impute", &json(&cfg.impute))]);
    out.finish("manifest.json", "impute", cfg.seed, hash)
}

fn bhm_data(panel: &PanelMatrix, covariates: &[(String, PanelMatrix)]) -> Result<BhmData> {
    BhmData::from_panel(panel, covariates).map_err(stage_err("bhm"))
}

/// Fits the model and returns the summary rows plus the fitted object for
/// optional extra outputs.
enum BhmFit {
    Mcmc(bhm::PosteriorSamples),
    Vi(bhm::ViApprox),
}

fn run_bhm(data: &BhmData, stage: &BhmStage, log: &Log) -> Result<(BhmFit, Vec<ParamSummary>)> {
    let spec = stage.spec.clone().unwrap_or_else(|| BhmSpec::scaled_to(data));
    match stage.method {
        BhmMethod::Mcmc => {
            let s = fit_mcmc(data, &spec, &stage.mcmc).map_err(stage_err("bhm"))?;
            for w in &s.warnings {
                log.info(format!("bhm: warning: {w}"));
            }
            let summary = posterior_summary(&s);
            log.info(format!(
                "bhm: mcmc {} chains x {} draws; max R-hat {:.4}",
                s.n_chains(),
                s.n_kept(),
                summary.iter().filter_map(|r| r.rhat).fold(f64::NAN, f64::max)
            ));
            Ok((BhmFit::Mcmc(s), summary))
        }
        BhmMethod::Vi => {
            let v = fit_vi(data, &spec, &stage.vi).map_err(stage_err("bhm"))?;
            log.info(format!(
                "bhm: vi {} iterations; final ELBO {:.4}",
                v.elbo_trace.len(),
                v.elbo_trace.last().copied().unwrap_or(f64::NAN)
            ));
            let summary = posterior_summary(&v);
            Ok((BhmFit::Vi(v), summary))
        }
    }
}

fn cmd_fit_bhm(cfg: &RunConfig, log: &Log) -> Result<()> {
    let input = cfg.input()?;
    let panel = read_panel(input).map_err(stage_err("bhm"))?;
    let covs = read_covariates(cfg, "bhm")?;
    let data = bhm_data(&panel, &covs)?;
    let (fit, summary) = run_bhm(&data, &cfg.bhm, log)?;
    let mut out = Outputs::in_dir(cfg.out()?)?;
    let mut buf = Vec::new();
    bhm::write_summary_csv(&summary, &mut buf).map_err(stage_err("output"))?;
    out.put("posterior_summary.csv", &buf)?;
    match &fit {
        BhmFit::Mcmc(s) => {
            let mut buf = Vec::new();
            s.write_draws_csv(&mut buf).map_err(stage_err("output"))?;
            out.put("draws.csv", &buf)?;
        }
        BhmFit::Vi(v) => {
            let mut buf = String::from("iter,elbo\n");
            for (i, e) in v.elbo_trace.iter().enumerate() {
                buf.push_str(&format!("{},{e:?}\n", i + 1));
            }
            out.put("elbo_trace.csv", buf.as_bytes())?;
        }
    }
    let mut parts = vec![("panel".to_string(), file_bytes(input)?)];
    parts.extend(covariate_bytes(cfg)?);
    parts.push(("bhm".into(), json(&cfg.bhm)));
    let refs: Vec<(&str, &[u8])> = parts.iter().map(|(k, v)| (k.as_str(), v.as_slice())).collect();
    out.finish("manifest.json", "fit-bhm", cfg.seed, hash_inputs(&refs))
}

/// Design for the LASSO stage: the panel on its covariates when any are
/// given, otherwise the target sector on the other sectors.
fn lasso_design(
    panel: &PanelMatrix,
    covariates: &[(String, PanelMatrix)],
    target: Sector,
) -> std::result::Result<RegressionData, eval::EvalError> {
    if covariates.is_empty() {
        eval::sector_design(panel, target)
    } else {
        covariate_design(panel, covariates)
    }
}

/// Standardises, cross-validates λ, refits at the CV-best λ and reports
/// in-sample RMSE.
pub fn run_lasso(data: &RegressionData, stage: &LassoStage, seed: u64) -> Result<LassoReport> {
    let (z, _) = standardize(&data.x).map_err(stage_err("lasso"))?;
    let cv = cv_lasso(&z, &data.y, stage.cv_folds, &stage.path, seed).map_err(stage_err("lasso"))?;
    let fit = fit_lasso(&z, &data.y, cv.best_lambda, stage.path.tol, stage.path.max_iters).map_err(stage_err("lasso"))?;
    let pred = fit.predict(&z);
    let mut report = LassoReport::new(&fit, &data.predictors, Some(&cv));
    report.rmse = Some(eval::metrics(&data.y, &pred).map_err(stage_err("lasso"))?.rmse);
    Ok(report)
}

fn cmd_lasso(cfg: &RunConfig, log: &Log) -> Result<()> {
    let input = cfg.input()?;
    let panel = read_panel(input).map_err(stage_err("lasso"))?;
    let covs = read_covariates(cfg, "lasso")?;
    let data = lasso_design(&panel, &covs, cfg.lasso.target).map_err(stage_err("lasso"))?;
    let report = run_lasso(&data, &cfg.lasso, cfg.seed)?;
    log.info(format!("lasso: selected {:?} at lambda={:.6}", report.selected_names, report.lambda));
    let mut bytes = serde_json::to_vec_pretty(&report).map_err(stage_err("output"))?;
    bytes.push(b'\n');
    let mut parts = vec![("panel".to_string(), file_bytes(input)?)];
    parts.extend(covariate_bytes(cfg)?);
    parts.push(("lasso".into(), json(&cfg.lasso)));
    let refs: Vec<(&str, &[u8])> = parts.iter().map(|(k, v)| (k.as_str(), v.as_slice())).collect();
    single_file_output(cfg.out()?, &bytes, "lasso", cfg.seed, hash_inputs(&refs))
}

/// Data matrix for factor analysis with variable names and row labels.
fn factor_table(panel: &PanelMatrix, vars: FactorVariables) -> Result<(DMatrix<f64>, Vec<String>, Vec<String>)> {
    if !panel.is_complete() {
        return Err(CliError::Stage { stage: "factor", message: "panel has missing cells; impute first".into() });
    }
    match vars {
        FactorVariables::Entities => Ok((
            panel.values().transpose(),
            panel.entities().iter().map(|e| e.to_string()).collect(),
            panel.years().iter().map(|y| y.to_string()).collect(),
        )),
        FactorVariables::Sectors => {
            let mut countries: Vec<&str> = panel.entities().iter().map(|e| e.country.as_str()).collect();
            countries.dedup();
            countries.sort_unstable();
            countries.dedup();
            let sectors: Vec<Sector> = Sector::ALL
                .into_iter()
                .filter(|&s| countries.iter().all(|c| panel.row_of(&crate::panel::Entity::new(*c, s)).is_some()))
                .collect();
            if sectors.len() < 2 {
                return Err(CliError::Stage {
                    stage: "factor",
                    message: "fewer than two sectors shared by every country; use --variables entities".into(),
                });
            }
            let t = panel.n_cols();
            let rows: Vec<Vec<usize>> = countries
                .iter()
                .map(|c| sectors.iter().map(|&s| panel.row_of(&crate::panel::Entity::new(*c, s)).unwrap()).collect())
                .collect();
            let y = DMatrix::from_fn(countries.len() * t, sectors.len(), |r, k| panel.values()[(rows[r / t][k], r % t)]);
            let labels = countries
                .iter()
                .flat_map(|c| panel.years().iter().map(move |y| format!("{c}:{y}")))
                .collect();
            Ok((y, sectors.iter().map(|s| s.to_string()).collect(), labels))
        }
    }
}

fn cmd_factor(cfg: &RunConfig, log: &Log) -> Result<()> {
    let input = cfg.input()?;
    let panel = read_panel(input).map_err(stage_err("factor"))?;
    let (y, names, labels) = factor_table(&panel, cfg.factor.variables)?;
    let model = fit_em(&y, cfg.factor.k, &cfg.factor.em).map_err(stage_err("factor"))?;
    let scores = factor_scores(&model, &y).map_err(stage_err("factor"))?;
    let loglik = model.loglik_trace.last().copied().unwrap_or(f64::NAN);
    let (p, k) = (names.len(), cfg.factor.k);
    // means, uniquenesses and loadings less the rotational freedom
    let n_params = 2 * p + p * k - k * (k.saturating_sub(1)) / 2;
    let bic = eval::bic(loglik, y.nrows(), n_params).map_err(stage_err("factor"))?;
    log.info(format!("factor: k={k} loglik={loglik:.6} bic={bic:.6} after {} EM steps", model.loglik_trace.len()));
    let mut out = Outputs::in_dir(cfg.out()?)?;
    let mut buf = Vec::new();
    model.write_loadings_csv(&names, &mut buf).map_err(stage_err("factor"))?;
    out.put("loadings.csv", &buf)?;
    let mut buf = Vec::new();
    scores.write_csv(&labels, &mut buf).map_err(stage_err("factor"))?;
    out.put("scores.csv", &buf)?;
    let summary = serde_json::json!({
        "k": k,
        "variables": names,
        "uniquenesses": model.uniquenesses,
        "loglik": loglik,
        "bic": bic,
        "n_params": n_params,
        "converged": model.converged,
        "loglik_trace": model.loglik_trace,
    });
    let mut bytes = serde_json::to_vec_pretty(&summary).map_err(stage_err("factor"))?;
    bytes.push(b'\n');
    out.put("factor.json", &bytes)?;
    let hash = hash_inputs(&[("panel", &file_bytes(input)?), ("factor", &json(&cfg.factor))]);
    out.finish("manifest.json", "factor", cfg.seed, hash)
}

fn cmd_sweep(cfg: &RunConfig, log: &Log) -> Result<()> {
    let input = cfg.input()?;
    let panel = read_panel(input).map_err(stage_err("sweep"))?;
    let report = missingness_sweep(&panel, &cfg.sweep).map_err(stage_err("sweep"))?;
    let summary = report.summary();
    for s in &summary {
        log.info(format!(
            "sweep: {} {:.2} {}: median rmse {}",
            s.mechanism.as_str(),
            s.fraction,
            s.method.as_str(),
            s.median_rmse.map(|v| format!("{v:.6}")).unwrap_or_else(|| "n/a".into())
        ));
    }
    let mut out = Outputs::in_dir(cfg.out()?)?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf).map_err(stage_err("sweep"))?;
    out.put("sweep.csv", &buf)?;
    let mut bytes = serde_json::to_vec_pretty(&summary).map_err(stage_err("sweep"))?;
    bytes.push(b'\n');
    out.put("sweep_summary.json", &bytes)?;
    let hash = hash_inputs(&[("panel", &file_bytes(input)?), ("sweep", &json(&cfg.sweep))]);
    out.finish("manifest.json", "sweep", cfg.seed, hash)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pipeline {
    Mcmc,
    Vi,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Mcmc => "pipeline-mcmc",
            Pipeline::Vi => "pipeline-vi",
        }
    }
}

/// In-memory inputs of a pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineInputs {
    pub panel: PanelMatrix,
    pub covariates: Vec<(String, PanelMatrix)>,
    /// Raw bytes hashed into each stage's provenance.
    pub provenance: Vec<(String, Vec<u8>)>,
}

impl PipelineInputs {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let input = cfg.input()?;
        let panel = read_panel(input).map_err(stage_err("input"))?;
        let covariates = read_covariates(cfg, "input")?;
        let mut provenance = vec![("panel".to_string(), file_bytes(input)?)];
        provenance.extend(covariate_bytes(cfg)?);
        Ok(PipelineInputs { panel, covariates, provenance })
    }

    fn hash(&self, extra: &[(&str, &[u8])]) -> String {
        let mut parts: Vec<(&str, &[u8])> = self.provenance.iter().map(|(k, v)| (k.as_str(), v.as_slice())).collect();
        parts.extend_from_slice(extra);
        hash_inputs(&parts)
    }
}

/// Runs impute → posterior → LASSO (→ sweep when enabled) in order.
///
/// `cfg` is used as given: the caller decides the posterior method and the
/// SoftImpute tolerance (see [`execute`] for the command-line variants).
/// Covariate panels must be complete. The LASSO stage is skipped when no
/// design can be built from the inputs.
pub fn run_pipeline(cfg: &RunConfig, pipeline: Pipeline, inputs: &PipelineInputs, log: &Log) -> Result<RunArtifacts> {
    let seed = cfg.seed;
    let mut impute_stage = cfg.impute.clone();
    impute_stage.method = Method::SoftImpute;

    let t0 = Instant::now();
    let imputed = run_impute(&inputs.panel, &impute_stage, log)?;
    let imputation = Stage {
        method: Method::SoftImpute.as_str().into(),
        inputs_hash: inputs.hash(&[("impute", &json(&impute_stage))]),
        seed,
        wall_time: t0.elapsed(),
        output: imputed,
    };
    let completed_bytes = panel_long_csv(&imputation.output.completed)?;

    let t0 = Instant::now();
    let data = bhm_data(&imputation.output.completed, &inputs.covariates)?;
    let mut bhm_stage = cfg.bhm.clone();
    bhm_stage.method = match pipeline {
        Pipeline::Mcmc => BhmMethod::Mcmc,
        Pipeline::Vi => BhmMethod::Vi,
    };
    let (_, summary) = run_bhm(&data, &bhm_stage, log)?;
    let posterior = Stage {
        method: match pipeline {
            Pipeline::Mcmc => "mcmc".into(),
            Pipeline::Vi => "vi".into(),
        },
        inputs_hash: inputs.hash(&[("imputed", &completed_bytes), ("bhm", &json(&bhm_stage))]),
        seed,
        wall_time: t0.elapsed(),
        output: summary,
    };

    let t0 = Instant::now();
    let lasso = match lasso_design(&imputation.output.completed, &inputs.covariates, cfg.lasso.target) {
        Ok(design) => {
            let report = run_lasso(&design, &cfg.lasso, seed)?;
            log.info(format!("lasso: selected {:?}", report.selected_names));
            Some(Stage {
                method: "cv-lasso".into(),
                inputs_hash: inputs.hash(&[("imputed", &completed_bytes), ("lasso", &json(&cfg.lasso))]),
                seed,
                wall_time: t0.elapsed(),
                output: report,
            })
        }
        Err(e) => {
            log.info(format!("lasso: skipped ({e})"));
            None
        }
    };

    let sweep = if cfg.pipeline_sweep {
        let t0 = Instant::now();
        let report = missingness_sweep(&inputs.panel, &cfg.sweep).map_err(stage_err("sweep"))?;
        Some(Stage {
            method: "sweep".into(),
            inputs_hash: inputs.hash(&[("sweep", &json(&cfg.sweep))]),
            seed,
            wall_time: t0.elapsed(),
            output: report,
        })
    } else {
        None
    };

    Ok(RunArtifacts {
        pipeline: pipeline.name().into(),
        seed,
        imputation: Some(imputation),
        posterior: Some(posterior),
        lasso,
        sweep,
    })
}

fn cmd_pipeline(cfg: &RunConfig, pipeline: Pipeline, log: &Log) -> Result<()> {
    let inputs = PipelineInputs::load(cfg)?;
    let out = cfg.out()?.to_path_buf();
    let run = run_pipeline(cfg, pipeline, &inputs, log)?;
    let manifest = pipeline_report(&out, &run).map_err(stage_err("report"))?;
    for s in &manifest.stages {
        log.info(format!("{}: {:?}", s.stage.as_str(), s.status));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("sparsepanel").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn year_ranges() {
        assert_eq!(parse_years("1995:2020"), Ok((1995, 2020)));
        assert!(parse_years("2020:1995").is_err());
        assert!(parse_years("1995").is_err());
    }

    #[test]
    fn covariate_flag() {
        let c = parse_covariate("x1=data/x1.csv").unwrap();
        assert_eq!((c.name.as_str(), c.path.as_path()), ("x1", Path::new("data/x1.csv")));
        assert!(parse_covariate("x1").is_err());
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"seed": 3, "simulate": {"synth": {"n_countries": 9}, "kind": "lowrank"}}"#).unwrap();
        let cli = parse(&["simulate", "--config", path.to_str().unwrap(), "--countries", "4"]);
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!(cfg.simulate.synth.n_countries, 4);
        assert_eq!(cfg.simulate.kind, SimKind::Lowrank);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.simulate.synth.seed, 3);

        let cli = parse(&["simulate", "--config", path.to_str().unwrap(), "--seed", "8"]);
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!((cfg.seed, cfg.simulate.synth.n_countries, cfg.bhm.mcmc.seed), (8, 9, 8));
    }

    #[test]
    fn unknown_config_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"sed": 3}"#).unwrap();
        let err = resolve_config(&parse(&["simulate", "--config", path.to_str().unwrap()])).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let line = err.to_json_line();
        assert!(!line.contains('\n'));
        assert!(line.starts_with(r#"{"error":"config""#), "{line}");
    }

    #[test]
    fn stage_errors_exit_one_and_name_the_stage() {
        let e = CliError::Stage { stage: "bhm", message: "boom\nsecond".into() };
        assert_eq!(e.exit_code(), 1);
        let line = e.to_json_line();
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["stage"], "bhm");
    }

    #[test]
    fn default_config_round_trips_through_json() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_slice(&json(&cfg)).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn wide_and_long_panels_read_alike() {
        let dir = tempfile::tempdir().unwrap();
        let p = gen_lowrank_panel(&SynthConfig { n_countries: 2, year_start: 2001, year_end: 2004, ..Default::default() })
            .unwrap()
            .panel;
        let (long, wide) = (dir.path().join("l.csv"), dir.path().join("w.csv"));
        p.write_long_csv(fs::File::create(&long).unwrap()).unwrap();
        p.write_wide_csv(fs::File::create(&wide).unwrap()).unwrap();
        assert_eq!(read_panel(&long).unwrap(), p);
        assert_eq!(read_panel(&wide).unwrap(), p);
    }

    #[test]
    fn factor_table_sector_layout() {
        let p = gen_levels_panel(&SynthConfig { n_countries: 2, year_start: 2001, year_end: 2003, ..Default::default() })
            .unwrap();
        let (y, names, labels) = factor_table(&p, FactorVariables::Sectors).unwrap();
        assert_eq!(y.shape(), (6, 4));
        assert_eq!(names, vec!["Agriculture", "Industry", "Services", "GDP"]);
        assert_eq!(labels[0], "C001:2001");
        let (y, _, _) = factor_table(&p, FactorVariables::Entities).unwrap();
        assert_eq!(y.shape(), (3, 8));
    }
}
