//! Blocked Gibbs sampler.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mean_sd, BhmData, BhmError, BhmSpec, Effect, Layout, PosteriorSamples, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub chains: usize,
    pub warmup: usize,
    /// Draws kept per chain after warmup and thinning.
    pub samples: usize,
    pub thin: usize,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            chains: 4,
            warmup: 1000,
            samples: 1000,
            thin: 1,
            seed: 0,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.samples == 0 || self.thin == 0 {
            return Err(BhmError::InvalidSpec("chains, samples and thin must be >= 1".into()));
        }
        Ok(())
    }
}

struct Sampler<'a> {
    data: &'a BhmData,
    spec: &'a BhmSpec,
    layout: Layout,
    design: DMatrix<f64>,
    dtd: DMatrix<f64>,
    group_n: Vec<f64>,
    time_n: Vec<f64>,
    sigma_scale: f64,
}

struct State {
    beta: DVector<f64>,
    gamma: Vec<f64>,
    delta: Vec<f64>,
    sigma: f64,
}

fn normal(rng: &mut rng::Rng) -> f64 {
    StandardNormal.sample(rng)
}

impl Sampler<'_> {
    fn draw_beta(&self, s: &mut State, rng: &mut rng::Rng) -> Result<()> {
        let d = self.data;
        let q = self.layout.q;
        let inv_s2 = 1.0 / (s.sigma * s.sigma);
        let inv_t2 = 1.0 / (self.spec.prior_beta_sd * self.spec.prior_beta_sd);
        let mut rhs = DVector::from_element(q, self.spec.prior_beta_mean * inv_t2);
        for i in 0..d.n_obs() {
            let ystar = d.y[i] - effect(&s.gamma, d.group[i]) - effect(&s.delta, d.time[i]);
            for k in 0..q {
                rhs[k] += self.design[(i, k)] * ystar * inv_s2;
            }
        }
        let prec = &self.dtd * inv_s2 + DMatrix::identity(q, q) * inv_t2;
        let chol = prec
            .cholesky()
            .ok_or_else(|| BhmError::NonFiniteLikelihood("β precision not positive definite".into()))?;
        let mean = chol.solve(&rhs);
        let z = DVector::from_fn(q, |_, _| normal(rng));
        let dev = chol
            .l()
            .transpose()
            .solve_upper_triangular(&z)
            .ok_or_else(|| BhmError::NonFiniteLikelihood("β factor singular".into()))?;
        s.beta = mean + dev;
        Ok(())
    }

    /// Draws one effect block given everything else, conditioning exactly on
    /// the sum-to-zero constraint when it is enabled.
    #[allow(clippy::too_many_arguments)]
    fn draw_effect(
        &self,
        mode: Effect,
        index: &[usize],
        counts: &[f64],
        prior_sd: f64,
        partial: &[f64],
        sigma: f64,
        rng: &mut rng::Rng,
    ) -> Vec<f64> {
        let m = counts.len();
        let mut sums = vec![0.0; m];
        for (i, &g) in index.iter().enumerate() {
            sums[g] += partial[i];
        }
        let inv_s2 = 1.0 / (sigma * sigma);
        let inv_t2 = 1.0 / (prior_sd * prior_sd);
        let mut var = vec![0.0; m];
        let mut z: Vec<f64> = (0..m)
            .map(|g| {
                let prec = counts[g] * inv_s2 + inv_t2;
                var[g] = 1.0 / prec;
                sums[g] * inv_s2 * var[g] + var[g].sqrt() * normal(rng)
            })
            .collect();
        if mode == Effect::SumZero {
            let total: f64 = z.iter().sum();
            let vsum: f64 = var.iter().sum();
            for (zg, vg) in z.iter_mut().zip(&var) {
                *zg -= vg * total / vsum;
            }
            // remove the last rounding residue so the constraint holds to
            // machine precision
            let drift = z.iter().sum::<f64>() / m as f64;
            z.iter_mut().for_each(|v| *v -= drift);
        }
        z
    }

    fn draw_sigma(&self, s: &mut State, fitted: &[f64], rng: &mut rng::Rng) -> Result<bool> {
        let d = self.data;
        let ss: f64 = (0..d.n_obs()).map(|i| (d.y[i] - fitted[i]).powi(2)).sum();
        if !ss.is_finite() {
            return Err(BhmError::NonFiniteLikelihood("residual sum of squares".into()));
        }
        // propose σ² from the likelihood's inverse-gamma kernel and correct for
        // the half-Normal prior with an independence Metropolis step
        let shape = (d.n_obs() as f64 - 1.0) / 2.0;
        let ss = ss.max(f64::MIN_POSITIVE);
        let g = Gamma::new(shape, 1.0).map_err(|e| BhmError::NonFiniteLikelihood(e.to_string()))?;
        let proposal = (ss / 2.0 / g.sample(rng)).sqrt();
        let two_s2 = 2.0 * self.sigma_scale * self.sigma_scale;
        let log_ratio = -(proposal * proposal - s.sigma * s.sigma) / two_s2;
        if log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio {
            s.sigma = proposal;
            return Ok(true);
        }
        Ok(false)
    }

    fn run_chain(&self, chain: usize, cfg: &McmcConfig) -> Result<(DMatrix<f64>, f64)> {
        let d = self.data;
        let n = d.n_obs();
        let mut rng = rng::stream(cfg.seed, chain as u64 + 1);
        let (ymean, ysd) = mean_sd(&d.y);
        let ysd = if ysd > 0.0 { ysd } else { 1.0 };
        let mut s = State {
            beta: DVector::zeros(self.layout.q),
            gamma: vec![0.0; if self.layout.gamma == Effect::Off { 0 } else { self.layout.n_groups }],
            delta: vec![0.0; if self.layout.delta == Effect::Off { 0 } else { self.layout.n_times }],
            sigma: self.spec.fixed_sigma.unwrap_or(ysd * (0.5 * normal(&mut rng)).exp()),
        };
        s.beta[0] = ymean + 0.5 * ysd * normal(&mut rng);

        let n_params = self.layout.q + s.gamma.len() + s.delta.len() + 1;
        let mut kept = DMatrix::zeros(cfg.samples, n_params);
        let total = cfg.warmup + cfg.samples * cfg.thin;
        let mut fitted = vec![0.0; n];
        let mut partial = vec![0.0; n];
        let (mut accepted, mut proposed) = (0usize, 0usize);
        for it in 0..total {
            self.draw_beta(&mut s, &mut rng)?;
            let xb: Vec<f64> = (0..n)
                .map(|i| (0..self.layout.q).map(|k| self.design[(i, k)] * s.beta[k]).sum())
                .collect();
            if self.layout.gamma != Effect::Off {
                for i in 0..n {
                    partial[i] = d.y[i] - xb[i] - effect(&s.delta, d.time[i]);
                }
                s.gamma = self.draw_effect(
                    self.layout.gamma,
                    &d.group,
                    &self.group_n,
                    self.spec.prior_gamma_sd,
                    &partial,
                    s.sigma,
                    &mut rng,
                );
            }
            if self.layout.delta != Effect::Off {
                for i in 0..n {
                    partial[i] = d.y[i] - xb[i] - effect(&s.gamma, d.group[i]);
                }
                s.delta = self.draw_effect(
                    self.layout.delta,
                    &d.time,
                    &self.time_n,
                    self.spec.prior_delta_sd,
                    &partial,
                    s.sigma,
                    &mut rng,
                );
            }
            for i in 0..n {
                fitted[i] = xb[i] + effect(&s.gamma, d.group[i]) + effect(&s.delta, d.time[i]);
            }
            if self.layout.sigma_free {
                proposed += 1;
                accepted += usize::from(self.draw_sigma(&mut s, &fitted, &mut rng)?);
            }

            if it >= cfg.warmup && (it - cfg.warmup).is_multiple_of(cfg.thin) {
                let row = (it - cfg.warmup) / cfg.thin;
                let values = s.beta.iter().chain(&s.gamma).chain(&s.delta).chain(std::iter::once(&s.sigma));
                for (k, &v) in values.enumerate() {
                    if !v.is_finite() {
                        return Err(BhmError::NonFiniteLikelihood(format!("chain {chain} iteration {it}")));
                    }
                    kept[(row, k)] = v;
                }
            }
        }
        let rate = if proposed == 0 { 1.0 } else { accepted as f64 / proposed as f64 };
        Ok((kept, rate))
    }
}

fn effect(v: &[f64], k: usize) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v[k]
    }
}

/// Runs `cfg.chains` independent Gibbs chains.
///
/// Each sweep draws β from its Gaussian full conditional, then the entity and
/// year effects (sum-to-zero constraints are imposed by exact Gaussian
/// conditioning), then σ by an independence Metropolis step whose proposal is
/// the likelihood's inverse-gamma kernel. Chain `c` uses the random stream
/// `(seed, c + 1)`, so results do not depend on thread scheduling.
pub fn fit_mcmc(data: &BhmData, spec: &BhmSpec, cfg: &McmcConfig) -> Result<PosteriorSamples> {
    spec.validate()?;
    cfg.validate()?;
    if spec.fixed_sigma.is_none() && data.n_obs() < 2 {
        return Err(BhmError::InvalidSpec("sampling sigma needs at least 2 observations".into()));
    }
    let layout = Layout::new(data, spec);
    let n = data.n_obs();
    let design = DMatrix::from_fn(n, layout.q, |i, k| if k == 0 { 1.0 } else { data.x[(i, k - 1)] });
    let mut warnings = Vec::new();
    let sv = design.clone().singular_values();
    if sv.min() <= 1e-10 * sv.max() {
        warnings.push("design matrix is rank deficient; the β prior regularises the fit".to_string());
    }
    let mut group_n = vec![0.0; layout.n_groups];
    data.group.iter().for_each(|&g| group_n[g] += 1.0);
    let mut time_n = vec![0.0; layout.n_times];
    data.time.iter().for_each(|&t| time_n[t] += 1.0);
    let (_, ysd) = mean_sd(&data.y);
    let sampler = Sampler {
        data,
        spec,
        dtd: design.transpose() * &design,
        design,
        group_n,
        time_n,
        sigma_scale: spec.prior_sigma_scale.unwrap_or(2.5 * if ysd > 0.0 { ysd } else { 1.0 }),
        layout,
    };
    let results: Vec<Result<(DMatrix<f64>, f64)>> =
        (0..cfg.chains).into_par_iter().map(|c| sampler.run_chain(c, cfg)).collect();
    let mut chains = Vec::with_capacity(cfg.chains);
    let mut sigma_acceptance = Vec::with_capacity(cfg.chains);
    for r in results {
        let (draws, rate) = r?;
        chains.push(draws);
        sigma_acceptance.push(rate);
    }
    Ok(PosteriorSamples {
        names: sampler.layout.names(data),
        chains,
        warmup: cfg.warmup,
        thin: cfg.thin,
        seed: cfg.seed,
        warnings,
        sigma_acceptance,
    })
}
