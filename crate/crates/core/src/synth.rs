//! Synthetic panels with known ground truth, and missingness injection.

use nalgebra::DMatrix;
use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{Entity, PanelMatrix, Sector, ShareSeries, ShareTriple};
use crate::rng;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("infeasible fraction {fraction} for {mechanism:?}: {reason}")]
    InfeasibleFraction {
        mechanism: Mechanism,
        fraction: f64,
        reason: String,
    },
    #[error(transparent)]
    Panel(#[from] crate::panel::PanelError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Logistic drift of one country's sector shares.
///
/// Agriculture starts at `ag_start` and falls by `ag_drop` over the window;
/// services start at `services_start` and rise by `services_rise`; industry is
/// the residual. `rate` is the logistic steepness (0 gives a straight line)
/// and `midpoint` the inflection point as a fraction of the window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShareTrend {
    pub ag_start: f64,
    pub ag_drop: f64,
    pub services_start: f64,
    pub services_rise: f64,
    pub rate: f64,
    pub midpoint: f64,
}

impl ShareTrend {
    pub fn constant(initial: ShareTriple) -> Self {
        ShareTrend {
            ag_start: initial.agriculture,
            ag_drop: 0.0,
            services_start: initial.services,
            services_rise: 0.0,
            rate: 0.0,
            midpoint: 0.5,
        }
    }

    /// Progress of the transition at `tau` in [0, 1], normalised to run from 0 to 1.
    fn progress(&self, tau: f64) -> f64 {
        if self.rate.abs() < 1e-9 {
            return tau;
        }
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        let lo = s(-self.rate * self.midpoint);
        let hi = s(self.rate * (1.0 - self.midpoint));
        (s(self.rate * (tau - self.midpoint)) - lo) / (hi - lo)
    }
}

/// Trends calibrated to the five-country share moments used as the
/// simulation target (agriculture mean ≈ 0.40, std ≈ 0.19 over 1995–2020).
pub fn calibrated_trends() -> Vec<ShareTrend> {
    let t = |ag_start, ag_drop, services_start, services_rise, rate, midpoint| ShareTrend {
        ag_start,
        ag_drop,
        services_start,
        services_rise,
        rate,
        midpoint,
    };
    vec![
        t(0.694, 0.567, 0.110, 0.373, 4.90, 0.458),
        t(0.684, 0.544, 0.112, 0.355, 4.61, 0.445),
        t(0.691, 0.542, 0.107, 0.355, 4.83, 0.443),
        t(0.679, 0.526, 0.111, 0.341, 4.44, 0.433),
        t(0.686, 0.549, 0.114, 0.357, 4.61, 0.445),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_countries: usize,
    pub year_start: i32,
    pub year_end: i32,
    /// Sectors per country in the low-rank panel; N = n_countries × sectors.
    pub sectors: Vec<Sector>,
    pub rank: usize,
    pub noise_sd: f64,
    pub share_noise_sd: f64,
    /// Cycled when shorter than `n_countries`.
    pub share_trend: Vec<ShareTrend>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_countries: 5,
            year_start: 1995,
            year_end: 2020,
            sectors: Sector::ALL.to_vec(),
            rank: 2,
            noise_sd: 0.01,
            share_noise_sd: 0.015,
            share_trend: calibrated_trends(),
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn n_years(&self) -> usize {
        (self.year_end - self.year_start + 1).max(0) as usize
    }

    pub fn years(&self) -> Vec<i32> {
        (self.year_start..=self.year_end).collect()
    }

    pub fn n_entities(&self) -> usize {
        self.n_countries * self.sectors.len()
    }

    pub fn country_code(i: usize) -> String {
        format!("C{:03}", i + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.n_countries == 0 {
            return bad("n_countries must be >= 1".into());
        }
        if self.year_end < self.year_start {
            return bad(format!("empty year range {}:{}", self.year_start, self.year_end));
        }
        if self.sectors.is_empty() {
            return bad("sectors must be non-empty".into());
        }
        let n = self.n_entities().min(self.n_years());
        if self.rank == 0 || self.rank > n {
            return bad(format!("rank {} outside [1, {n}]", self.rank));
        }
        if !(self.noise_sd >= 0.0) || !(self.share_noise_sd >= 0.0) {
            return bad("noise sd must be >= 0".into());
        }
        if self.share_trend.is_empty() {
            return bad("share_trend must be non-empty".into());
        }
        for (k, t) in self.share_trend.iter().enumerate() {
            let ends = [
                t.ag_start,
                t.ag_start - t.ag_drop,
                t.services_start,
                t.services_start + t.services_rise,
            ];
            let ind = [
                1.0 - t.ag_start - t.services_start,
                1.0 - (t.ag_start - t.ag_drop) - (t.services_start + t.services_rise),
            ];
            if ends.iter().chain(&ind).any(|v| !(0.0..=1.0).contains(v)) || !t.rate.is_finite() {
                return bad(format!("share_trend[{k}] leaves the simplex"));
            }
        }
        Ok(())
    }
}

/// Sector share trajectories per country.
///
/// The noiseless path follows the logistic trend; Gaussian noise is added to
/// each component, clipped to [0.01, 0.98] and renormalised to sum to one.
pub fn gen_sector_shares(config: &SynthConfig) -> Result<Vec<ShareSeries>> {
    config.validate()?;
    let years = config.years();
    let t_len = years.len();
    let mut rng = rng::stream(config.seed, rng::label_tag("shares"));
    let mut out = Vec::with_capacity(config.n_countries);
    for c in 0..config.n_countries {
        let trend = config.share_trend[c % config.share_trend.len()];
        let mut shares = Vec::with_capacity(t_len);
        for k in 0..t_len {
            let tau = if t_len > 1 { k as f64 / (t_len - 1) as f64 } else { 0.0 };
            let p = trend.progress(tau);
            let ag = trend.ag_start - trend.ag_drop * p;
            let sv = trend.services_start + trend.services_rise * p;
            let mut parts = [ag, 1.0 - ag - sv, sv];
            if config.share_noise_sd > 0.0 {
                for x in parts.iter_mut() {
                    let e: f64 = rng.sample(StandardNormal);
                    *x = (*x + config.share_noise_sd * e).clamp(0.01, 0.98);
                }
            }
            let total: f64 = parts.iter().sum();
            let [a, i, _] = parts.map(|x| x / total);
            // services takes the rounding residual so the triple sums to one
            shares.push(ShareTriple::new(a, i, 1.0 - a - i)?);
        }
        out.push(ShareSeries {
            country: SynthConfig::country_code(c),
            years: years.clone(),
            shares,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct LowRankPanel {
    pub panel: PanelMatrix,
    /// N × r entity factors.
    pub u: DMatrix<f64>,
    /// T × r time factors.
    pub v: DMatrix<f64>,
}

impl LowRankPanel {
    pub fn signal(&self) -> DMatrix<f64> {
        &self.u * self.v.transpose()
    }
}

/// `U Vᵀ + E` with standard-normal factors and `E ~ N(0, noise_sd²)`.
pub fn gen_lowrank_panel(config: &SynthConfig) -> Result<LowRankPanel> {
    config.validate()?;
    let (n, t, r) = (config.n_entities(), config.n_years(), config.rank);
    let mut rng = rng::stream(config.seed, rng::label_tag("lowrank"));
    let mut draw = |rows, cols| DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    let u = draw(n, r);
    let v = draw(t, r);
    let mut values = &u * v.transpose();
    if config.noise_sd > 0.0 {
        let noise = Normal::new(0.0, config.noise_sd).map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
        for x in values.iter_mut() {
            *x += noise.sample(&mut rng);
        }
    }
    let panel = PanelMatrix::observed(entities(config), config.years(), values)?;
    Ok(LowRankPanel { panel, u, v })
}

fn entities(config: &SynthConfig) -> Vec<Entity> {
    (0..config.n_countries)
        .flat_map(|c| {
            config
                .sectors
                .iter()
                .map(move |&s| Entity::new(SynthConfig::country_code(c), s))
        })
        .collect()
}

/// GDP and sector value-added levels built from the share trajectories.
///
/// GDP follows a country-specific exponential growth path with multiplicative
/// noise; each sector's value added is its share of GDP with a small
/// independent measurement error, so GDP is close to the sum of the sectors.
pub fn gen_levels_panel(config: &SynthConfig) -> Result<PanelMatrix> {
    let shares = gen_sector_shares(config)?;
    let mut rng = rng::stream(config.seed, rng::label_tag("levels"));
    let years = config.years();
    let sectors = [Sector::Agriculture, Sector::Industry, Sector::Services, Sector::Gdp];
    let mut ents = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for series in &shares {
        let base: f64 = 10f64.powf(10.0 + rng.random::<f64>() * 1.5);
        let growth = 0.03 + 0.03 * rng.random::<f64>();
        let gdp: Vec<f64> = (0..years.len())
            .map(|k| {
                let e: f64 = rng.sample(StandardNormal);
                base * (growth * k as f64 + 0.03 * e).exp()
            })
            .collect();
        for (si, &sector) in sectors.iter().enumerate() {
            let row = (0..years.len())
                .map(|k| {
                    if sector == Sector::Gdp {
                        gdp[k]
                    } else {
                        let e: f64 = rng.sample(StandardNormal);
                        series.shares[k].as_array()[si] * gdp[k] * (1.0 + 0.02 * e)
                    }
                })
                .collect();
            ents.push(Entity::new(series.country.clone(), sector));
            rows.push(row);
        }
    }
    let values = DMatrix::from_fn(ents.len(), years.len(), |i, j| rows[i][j]);
    Ok(PanelMatrix::observed(ents, years, values)?)
}

/// Ground truth for a panel simulated from the hierarchical model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HierTruth {
    pub beta0: f64,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub delta: Vec<f64>,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HierConfig {
    pub n_entities: usize,
    pub year_start: i32,
    pub n_years: usize,
    pub beta0: f64,
    pub beta: Vec<f64>,
    pub gamma_sd: f64,
    pub delta_sd: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for HierConfig {
    fn default() -> Self {
        HierConfig {
            n_entities: 20,
            year_start: 2001,
            n_years: 20,
            beta0: 1.0,
            beta: vec![2.0],
            gamma_sd: 1.0,
            delta_sd: 0.5,
            sigma: 1.0,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HierPanel {
    pub y: PanelMatrix,
    pub covariates: Vec<PanelMatrix>,
    pub truth: HierTruth,
}

/// Draws a panel from `y = β₀ + Σ βₖ xₖ + γᵢ + δₜ + ε` with standard-normal
/// covariates and sum-to-zero effects.
pub fn gen_hierarchical_panel(cfg: &HierConfig) -> Result<HierPanel> {
    if cfg.n_entities < 2 || cfg.n_years < 2 {
        return Err(SynthError::InvalidConfig("need at least 2 entities and 2 years".into()));
    }
    if !(cfg.sigma > 0.0) || cfg.gamma_sd < 0.0 || cfg.delta_sd < 0.0 {
        return Err(SynthError::InvalidConfig("scales must be positive".into()));
    }
    let mut rng = rng::stream(cfg.seed, rng::label_tag("hier"));
    let (n, t) = (cfg.n_entities, cfg.n_years);
    let mut centered = |len: usize, sd: f64| -> Vec<f64> {
        let mut v: Vec<f64> = (0..len).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
        let m = v.iter().sum::<f64>() / len as f64;
        v.iter_mut().for_each(|x| *x -= m);
        v
    };
    let gamma = centered(n, cfg.gamma_sd);
    let delta = centered(t, cfg.delta_sd);
    let xs: Vec<DMatrix<f64>> = cfg
        .beta
        .iter()
        .map(|_| DMatrix::from_fn(n, t, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let y = DMatrix::from_fn(n, t, |i, j| {
        let e: f64 = rng.sample(StandardNormal);
        let cov: f64 = cfg.beta.iter().zip(&xs).map(|(b, x)| b * x[(i, j)]).sum();
        cfg.beta0 + cov + gamma[i] + delta[j] + cfg.sigma * e
    });
    let ents: Vec<Entity> = (0..n).map(|i| Entity::new(format!("E{:03}", i + 1), Sector::Gdp)).collect();
    let years: Vec<i32> = (0..t as i32).map(|k| cfg.year_start + k).collect();
    let covariates = xs
        .into_iter()
        .map(|x| PanelMatrix::observed(ents.clone(), years.clone(), x))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(HierPanel {
        y: PanelMatrix::observed(ents, years, y)?,
        covariates,
        truth: HierTruth {
            beta0: cfg.beta0,
            beta: cfg.beta.clone(),
            gamma,
            delta,
            sigma: cfg.sigma,
        },
    })
}

/// `n × p` standard-normal covariate grid (row-major rows).
pub fn gen_covariates(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng::stream(seed, rng::label_tag("covariates"));
    DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mechanism {
    #[serde(rename = "mcar", alias = "MCAR")]
    Mcar,
    #[serde(rename = "block", alias = "BlockByCountry")]
    BlockByCountry,
    #[serde(rename = "tail", alias = "TailYears")]
    TailYears,
}

impl Mechanism {
    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::Mcar => "mcar",
            Mechanism::BlockByCountry => "block",
            Mechanism::TailYears => "tail",
        }
    }
}

impl std::str::FromStr for Mechanism {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "mcar" => Ok(Mechanism::Mcar),
            "block" | "blockbycountry" => Ok(Mechanism::BlockByCountry),
            "tail" | "tailyears" => Ok(Mechanism::TailYears),
            other => Err(format!("unknown mechanism `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MissingnessSpec {
    pub mechanism: Mechanism,
    pub fraction: f64,
    pub seed: u64,
}

/// Masks a further `fraction` of the currently observed cells.
///
/// For a fully observed input the resulting missing fraction is within
/// ±0.02 of `fraction`. The input is not modified and already-missing cells
/// stay missing.
pub fn inject_missing(m: &PanelMatrix, spec: &MissingnessSpec) -> Result<PanelMatrix> {
    let infeasible = |reason: &str| SynthError::InfeasibleFraction {
        mechanism: spec.mechanism,
        fraction: spec.fraction,
        reason: reason.to_string(),
    };
    if !(0.0..1.0).contains(&spec.fraction) {
        return Err(infeasible("fraction must lie in [0, 1)"));
    }
    if spec.fraction == 0.0 {
        return Ok(m.clone());
    }
    let (n, t) = (m.n_rows(), m.n_cols());
    let observed = m.observed_count();
    let target = (spec.fraction * observed as f64).round() as usize;
    if target >= observed {
        return Err(infeasible("would remove every observed cell"));
    }
    let mut rng = rng::stream(spec.seed, rng::stream_key(&[rng::label_tag(spec.mechanism.as_str())]));
    let mut mask = m.mask().clone();

    match spec.mechanism {
        Mechanism::Mcar => {
            let cells: Vec<(usize, usize)> = (0..n)
                .flat_map(|i| (0..t).map(move |j| (i, j)))
                .filter(|&(i, j)| mask[(i, j)])
                .collect();
            for k in index::sample(&mut rng, cells.len(), target) {
                mask[cells[k]] = false;
            }
        }
        Mechanism::TailYears => {
            let tail = (spec.fraction * t as f64).ceil() as usize;
            if tail >= t {
                return Err(infeasible("tail would cover every year"));
            }
            let per_row = tail.max(1);
            let n_rows = ((target as f64) / per_row as f64).round() as usize;
            if n_rows > n {
                return Err(infeasible("not enough entities"));
            }
            for i in index::sample(&mut rng, n, n_rows.max(1)) {
                for j in t - per_row..t {
                    mask[(i, j)] = false;
                }
            }
        }
        Mechanism::BlockByCountry => {
            let mut countries: Vec<&str> = m.entities().iter().map(|e| e.country.as_str()).collect();
            countries.sort_unstable();
            countries.dedup();
            let rows_of = |c: &str| -> Vec<usize> {
                (0..n).filter(|&i| m.entities()[i].country == c).collect()
            };
            let base_len = ((2.0 * spec.fraction * t as f64).round() as usize).clamp(1, t.saturating_sub(1).max(1));
            let mut removed = 0usize;
            for _pass in 0..20 {
                countries.shuffle(&mut rng);
                for &c in &countries {
                    if removed >= target {
                        break;
                    }
                    let rows = rows_of(c);
                    let need = target - removed;
                    let len = base_len.min(need.div_ceil(rows.len())).max(1);
                    let start = rng.random_range(0..=t - len);
                    for &i in &rows {
                        let left = (0..t).filter(|&j| mask[(i, j)]).count();
                        let mut left = left;
                        for j in start..start + len {
                            if removed >= target {
                                break;
                            }
                            if mask[(i, j)] && left > 1 {
                                mask[(i, j)] = false;
                                left -= 1;
                                removed += 1;
                            }
                        }
                    }
                }
                if removed >= target {
                    break;
                }
            }
            let total = (n * t) as f64;
            if (target - removed) as f64 > 0.02 * total {
                return Err(infeasible("blocks could not reach the requested fraction"));
            }
        }
    }
    Ok(m.with_mask(mask)?)
}
