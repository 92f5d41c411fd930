//! Mean-field Gaussian variational inference.

use std::cell::RefCell;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{mean_sd, sum_zero_basis, BhmData, BhmError, BhmSpec, Effect, Layout, ParamSummary, Posterior, Result};
use crate::rng;

const LN_2PI: f64 = 1.837_877_066_409_345_3;
const Z95: f64 = 1.644_853_626_951_472_2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViConfig {
    pub iters: usize,
    /// Initial Adam step, in units of each parameter's natural scale.
    pub learning_rate: f64,
    /// The step at iteration t is `learning_rate · (1 + t/decay)^(−0.6)`.
    pub decay: f64,
    /// Fraction of final iterates averaged into the returned approximation.
    pub average_fraction: f64,
    pub seed: u64,
}

impl Default for ViConfig {
    fn default() -> Self {
        ViConfig {
            iters: 4000,
            learning_rate: 0.05,
            decay: 100.0,
            average_fraction: 0.5,
            seed: 0,
        }
    }
}

impl ViConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters < 20 || !(self.learning_rate > 0.0) || !(self.decay > 0.0) {
            return Err(BhmError::InvalidSpec("iters >= 20, learning_rate > 0 and decay > 0 required".into()));
        }
        if !(self.average_fraction > 0.0 && self.average_fraction <= 1.0) {
            return Err(BhmError::InvalidSpec("average_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// One factor `N(mean, exp(log_sd)²)` of the variational family, over the
/// unconstrained coordinates the optimiser works in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianFactor {
    pub name: String,
    pub mean: f64,
    pub log_sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViApprox {
    pub factors: Vec<GaussianFactor>,
    /// Single-sample ELBO estimate at every iteration.
    pub elbo_trace: Vec<f64>,
    /// Implied marginals of the natural parameters (β, γ, δ, σ).
    pub marginals: Vec<ParamSummary>,
    pub seed: u64,
}

impl Posterior for ViApprox {
    fn summary(&self) -> Vec<ParamSummary> {
        self.marginals.clone()
    }
}

struct Model<'a> {
    data: &'a BhmData,
    spec: &'a BhmSpec,
    layout: Layout,
    design: DMatrix<f64>,
    gamma_basis: Option<DMatrix<f64>>,
    delta_basis: Option<DMatrix<f64>>,
    n_gamma: usize,
    n_delta: usize,
    sigma_scale: f64,
    scratch: RefCell<Scratch>,
}

#[derive(Default)]
struct Scratch {
    gamma: Vec<f64>,
    delta: Vec<f64>,
    g_gamma: Vec<f64>,
    g_delta: Vec<f64>,
    g_coord: Vec<f64>,
}

/// `out = H c` for the sum-to-zero basis `H`, in O(m) via suffix sums.
fn helmert_apply(c: &[f64], out: &mut [f64]) {
    let m = out.len();
    let mut tail = 0.0;
    for i in (0..m).rev() {
        if i < m - 1 {
            let k1 = (i + 1) as f64;
            tail += c[i] / (k1 * (k1 + 1.0)).sqrt();
        }
        out[i] = tail;
        if i >= 1 {
            let k1 = i as f64;
            out[i] -= k1 * c[i - 1] / (k1 * (k1 + 1.0)).sqrt();
        }
    }
}

/// `out = Hᵀ g`, in O(m) via prefix sums.
fn helmert_transpose(g: &[f64], out: &mut [f64]) {
    let mut head = 0.0;
    for (k, o) in out.iter_mut().enumerate() {
        head += g[k];
        let k1 = (k + 1) as f64;
        *o = (head - k1 * g[k + 1]) / (k1 * (k1 + 1.0)).sqrt();
    }
}

fn coords(effect: Effect, m: usize) -> usize {
    match effect {
        Effect::Off => 0,
        Effect::Free => m,
        Effect::SumZero => m - 1,
    }
}

impl Model<'_> {
    fn dim(&self) -> usize {
        self.layout.q + self.n_gamma + self.n_delta + usize::from(self.layout.sigma_free)
    }

    fn effects(coords: &[f64], basis: &Option<DMatrix<f64>>, out: &mut Vec<f64>) {
        match basis {
            Some(h) => {
                out.resize(h.nrows(), 0.0);
                helmert_apply(coords, out);
            }
            None => {
                out.clear();
                out.extend_from_slice(coords);
            }
        }
    }

    /// Log joint density (with the log-σ Jacobian) and its gradient.
    fn log_joint(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.data;
        let q = self.layout.q;
        let (beta, rest) = theta.split_at(q);
        let (gc, rest) = rest.split_at(self.n_gamma);
        let (dc, rest) = rest.split_at(self.n_delta);
        let log_sigma = if self.layout.sigma_free {
            rest[0]
        } else {
            self.spec.fixed_sigma.unwrap_or(1.0).ln()
        };
        let sigma = log_sigma.exp();
        let inv_s2 = 1.0 / (sigma * sigma);
        let mut scratch = self.scratch.borrow_mut();
        let Scratch { gamma, delta, g_gamma, g_delta, g_coord } = &mut *scratch;
        Self::effects(gc, &self.gamma_basis, gamma);
        Self::effects(dc, &self.delta_basis, delta);

        grad.iter_mut().for_each(|g| *g = 0.0);
        g_gamma.clear();
        g_gamma.resize(gamma.len(), 0.0);
        g_delta.clear();
        g_delta.resize(delta.len(), 0.0);
        let mut ss = 0.0;
        for i in 0..d.n_obs() {
            let mut fit = 0.0;
            for k in 0..q {
                fit += self.design[(i, k)] * beta[k];
            }
            if !gamma.is_empty() {
                fit += gamma[d.group[i]];
            }
            if !delta.is_empty() {
                fit += delta[d.time[i]];
            }
            let e = d.y[i] - fit;
            ss += e * e;
            let w = e * inv_s2;
            for k in 0..q {
                grad[k] += self.design[(i, k)] * w;
            }
            if !gamma.is_empty() {
                g_gamma[d.group[i]] += w;
            }
            if !delta.is_empty() {
                g_delta[d.time[i]] += w;
            }
        }
        let n = d.n_obs() as f64;
        let mut lp = -0.5 * n * LN_2PI - n * log_sigma - 0.5 * ss * inv_s2;

        let (mu, tb) = (self.spec.prior_beta_mean, self.spec.prior_beta_sd);
        for k in 0..q {
            let z = (beta[k] - mu) / tb;
            lp += -0.5 * z * z - tb.ln() - 0.5 * LN_2PI;
            grad[k] -= z / tb;
        }
        let mut offset = q;
        for (c, g_nat, basis, sd) in [
            (gc, &*g_gamma, &self.gamma_basis, self.spec.prior_gamma_sd),
            (dc, &*g_delta, &self.delta_basis, self.spec.prior_delta_sd),
        ] {
            g_coord.clear();
            match basis {
                Some(_) => {
                    g_coord.resize(c.len(), 0.0);
                    helmert_transpose(g_nat, g_coord);
                }
                None => g_coord.extend_from_slice(g_nat),
            }
            let (log_sd, inv_sd) = (sd.ln(), 1.0 / sd);
            for (k, &v) in c.iter().enumerate() {
                let z = v * inv_sd;
                lp += -0.5 * z * z - log_sd - 0.5 * LN_2PI;
                grad[offset + k] = g_coord[k] - z * inv_sd;
            }
            offset += c.len();
        }
        if self.layout.sigma_free {
            let s = self.sigma_scale;
            let r = sigma / s;
            // half-Normal prior on σ plus the Jacobian of σ = exp(log σ)
            lp += std::f64::consts::LN_2 - s.ln() - 0.5 * LN_2PI - 0.5 * r * r + log_sigma;
            grad[offset] = -n + ss * inv_s2 - r * r + 1.0;
        }
        lp
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(dim: usize) -> Self {
        Adam {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    /// Gradient ascent step; `scale[k]` multiplies the step of coordinate k.
    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, scale: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for k in 0..params.len() {
            self.m[k] = Self::B1 * self.m[k] + (1.0 - Self::B1) * grad[k];
            self.v[k] = Self::B2 * self.v[k] + (1.0 - Self::B2) * grad[k] * grad[k];
            let mhat = self.m[k] / c1;
            let vhat = self.v[k] / c2;
            params[k] += lr * scale[k] * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

/// Fits a fully factorised Gaussian approximation to the posterior.
///
/// Effects under a sum-to-zero constraint are parameterised by orthonormal
/// coordinates of the constrained subspace, and σ by its logarithm. Each
/// iteration draws one reparameterised sample, takes an Adam step on the
/// ELBO gradient, and records the sample's ELBO estimate. The returned
/// factors average the iterates of the final `average_fraction` of the run.
pub fn fit_vi(data: &BhmData, spec: &BhmSpec, cfg: &ViConfig) -> Result<ViApprox> {
    spec.validate()?;
    cfg.validate()?;
    let layout = Layout::new(data, spec);
    let n = data.n_obs();
    let (ymean, ysd) = mean_sd(&data.y);
    let ysd = if ysd > 0.0 { ysd } else { 1.0 };
    let basis = |e: Effect, m: usize| (e == Effect::SumZero).then(|| sum_zero_basis(m));
    let model = Model {
        data,
        spec,
        design: DMatrix::from_fn(n, layout.q, |i, k| if k == 0 { 1.0 } else { data.x[(i, k - 1)] }),
        gamma_basis: basis(layout.gamma, layout.n_groups),
        delta_basis: basis(layout.delta, layout.n_times),
        n_gamma: coords(layout.gamma, layout.n_groups),
        n_delta: coords(layout.delta, layout.n_times),
        sigma_scale: spec.prior_sigma_scale.unwrap_or(2.5 * ysd),
        scratch: RefCell::default(),
        layout,
    };
    let dim = model.dim();
    let q = model.layout.q;

    // natural step scale of every coordinate
    let mut scale = vec![ysd; dim];
    for k in 1..q {
        let (_, xsd) = mean_sd(&data.x.column(k - 1).iter().copied().collect::<Vec<_>>());
        if xsd > 0.0 {
            scale[k] = ysd / xsd;
        }
    }
    if model.layout.sigma_free {
        scale[dim - 1] = 1.0;
    }
    let log_scale = vec![1.0; dim];

    let mut mean = vec![0.0; dim];
    mean[0] = ymean;
    if model.layout.sigma_free {
        mean[dim - 1] = ysd.ln();
    }
    let mut log_sd: Vec<f64> = scale.iter().map(|s| (0.1 * s).ln()).collect();

    let mut rng = rng::stream(cfg.seed, rng::label_tag("vi"));
    let mut adam_mean = Adam::new(dim);
    let mut adam_log_sd = Adam::new(dim);
    let mut eps = vec![0.0; dim];
    let mut theta = vec![0.0; dim];
    let mut grad = vec![0.0; dim];
    let mut g_log_sd = vec![0.0; dim];
    let mut sd = vec![0.0; dim];
    let entropy_const = 0.5 * (1.0 + LN_2PI);
    let avg_from = cfg.iters - ((cfg.iters as f64 * cfg.average_fraction).ceil() as usize).max(1);
    let mut avg_mean = vec![0.0; dim];
    let mut avg_log_sd = vec![0.0; dim];
    let mut elbo_trace = Vec::with_capacity(cfg.iters);

    for it in 0..cfg.iters {
        for k in 0..dim {
            eps[k] = StandardNormal.sample(&mut rng);
            sd[k] = log_sd[k].exp();
            theta[k] = mean[k] + sd[k] * eps[k];
        }
        let lp = model.log_joint(&theta, &mut grad);
        let entropy: f64 = log_sd.iter().map(|w| w + entropy_const).sum();
        let elbo = lp + entropy;
        if !elbo.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(BhmError::ElboDiverged(it));
        }
        elbo_trace.push(elbo);
        for k in 0..dim {
            g_log_sd[k] = grad[k] * eps[k] * sd[k] + 1.0;
        }
        let lr = cfg.learning_rate * (1.0 + it as f64 / cfg.decay).powf(-0.6);
        adam_mean.step(&mut mean, &grad, lr, &scale);
        adam_log_sd.step(&mut log_sd, &g_log_sd, lr, &log_scale);
        if it >= avg_from {
            for k in 0..dim {
                avg_mean[k] += mean[k];
                avg_log_sd[k] += log_sd[k];
            }
        }
    }
    let count = (cfg.iters - avg_from) as f64;
    avg_mean.iter_mut().for_each(|v| *v /= count);
    avg_log_sd.iter_mut().for_each(|v| *v /= count);

    let names = coordinate_names(&model);
    let factors: Vec<GaussianFactor> = names
        .into_iter()
        .zip(avg_mean.iter().zip(&avg_log_sd))
        .map(|(name, (&m, &s))| GaussianFactor { name, mean: m, log_sd: s })
        .collect();
    let marginals = natural_marginals(&model, &avg_mean, &avg_log_sd);
    Ok(ViApprox {
        factors,
        elbo_trace,
        marginals,
        seed: cfg.seed,
    })
}

fn coordinate_names(model: &Model) -> Vec<String> {
    let d = model.data;
    let mut names: Vec<String> = (0..model.layout.q).map(|k| format!("beta{k}")).collect();
    for (effect, label, m, nat) in [
        (model.layout.gamma, "gamma", model.n_gamma, d.group_names.clone()),
        (model.layout.delta, "delta", model.n_delta, d.time_labels.iter().map(|t| t.to_string()).collect()),
    ] {
        match effect {
            Effect::Off => {}
            Effect::Free => names.extend(nat.iter().map(|g| format!("{label}[{g}]"))),
            Effect::SumZero => names.extend((0..m).map(|k| format!("{label}_coord[{k}]"))),
        }
    }
    if model.layout.sigma_free {
        names.push("log_sigma".into());
    }
    names
}

fn gaussian_summary(name: String, mean: f64, sd: f64) -> ParamSummary {
    ParamSummary {
        param: name,
        mean,
        sd,
        q05: mean - Z95 * sd,
        q50: mean,
        q95: mean + Z95 * sd,
        rhat: None,
        ess: None,
    }
}

fn natural_marginals(model: &Model, mean: &[f64], log_sd: &[f64]) -> Vec<ParamSummary> {
    let d = model.data;
    let q = model.layout.q;
    let mut out: Vec<ParamSummary> = (0..q)
        .map(|k| gaussian_summary(format!("beta{k}"), mean[k], log_sd[k].exp()))
        .collect();
    let mut offset = q;
    for (effect, label, m, basis, nat) in [
        (model.layout.gamma, "gamma", model.n_gamma, &model.gamma_basis, d.group_names.clone()),
        (
            model.layout.delta,
            "delta",
            model.n_delta,
            &model.delta_basis,
            d.time_labels.iter().map(|t| t.to_string()).collect(),
        ),
    ] {
        if effect == Effect::Off {
            continue;
        }
        let mc = &mean[offset..offset + m];
        let sc: Vec<f64> = log_sd[offset..offset + m].iter().map(|w| w.exp()).collect();
        for (i, g) in nat.iter().enumerate() {
            let (mu, var) = match basis {
                Some(h) => (
                    (0..m).map(|k| h[(i, k)] * mc[k]).sum::<f64>(),
                    (0..m).map(|k| (h[(i, k)] * sc[k]).powi(2)).sum::<f64>(),
                ),
                None => (mc[i], sc[i] * sc[i]),
            };
            out.push(gaussian_summary(format!("{label}[{g}]"), mu, var.sqrt()));
        }
        offset += m;
    }
    if model.layout.sigma_free {
        let (m, s) = (mean[offset], log_sd[offset].exp());
        let s2 = s * s;
        out.push(ParamSummary {
            param: "sigma".into(),
            mean: (m + s2 / 2.0).exp(),
            sd: ((s2.exp() - 1.0) * (2.0 * m + s2).exp()).sqrt(),
            q05: (m - Z95 * s).exp(),
            q50: m.exp(),
            q95: (m + Z95 * s).exp(),
            rhat: None,
            ess: None,
        });
    } else {
        out.push(gaussian_summary("sigma".into(), model.spec.fixed_sigma.unwrap_or(1.0), 0.0));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use crate::bhm::tests::hier_data;
    use crate::bhm::{fit_mcmc, posterior_summary, McmcConfig};
    use crate::synth::HierConfig;

    fn conjugate() -> (BhmData, BhmSpec, f64) {
        let y: Vec<f64> = (0..40).map(|i| 2.0 + ((i * 29) % 13) as f64 / 4.0 - 1.5).collect();
        let (sigma, mu, tau) = (1.2, 0.0, 3.0);
        let n = y.len() as f64;
        let prec = 1.0 / (tau * tau) + n / (sigma * sigma);
        let post_mean = (mu / (tau * tau) + y.iter().sum::<f64>() / (sigma * sigma)) / prec;
        let len = y.len();
        let data =
            BhmData::new(y, DMatrix::zeros(len, 0), vec![0; len], vec![0; len], vec!["g".into()], vec![0], vec![])
                .unwrap();
        let spec = BhmSpec {
            prior_beta_mean: mu,
            prior_beta_sd: tau,
            include_gamma: false,
            include_delta: false,
            fixed_sigma: Some(sigma),
            ..BhmSpec::default()
        };
        (data, spec, post_mean)
    }

    #[test]
    fn fast_helmert_matches_dense_basis() {
        for m in [2, 3, 7, 20] {
            let h = sum_zero_basis(m);
            let c: Vec<f64> = (0..m - 1).map(|k| (k as f64 * 1.7).cos()).collect();
            let g: Vec<f64> = (0..m).map(|k| (k as f64 * 0.9).sin()).collect();
            let mut out = vec![0.0; m];
            helmert_apply(&c, &mut out);
            let dense = &h * DVector::from_column_slice(&c);
            let mut back = vec![0.0; m - 1];
            helmert_transpose(&g, &mut back);
            let dense_t = h.transpose() * DVector::from_column_slice(&g);
            for i in 0..m {
                assert!((out[i] - dense[i]).abs() < 1e-12, "m={m} i={i}");
            }
            for k in 0..m - 1 {
                assert!((back[k] - dense_t[k]).abs() < 1e-12, "m={m} k={k}");
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = hier_data(&HierConfig { n_entities: 4, n_years: 3, ..HierConfig::default() });
        let spec = BhmSpec::default();
        let layout = Layout::new(&data, &spec);
        let model = Model {
            data: &data,
            spec: &spec,
            design: DMatrix::from_fn(data.n_obs(), layout.q, |i, k| if k == 0 { 1.0 } else { data.x[(i, k - 1)] }),
            gamma_basis: Some(sum_zero_basis(4)),
            delta_basis: Some(sum_zero_basis(3)),
            n_gamma: 3,
            n_delta: 2,
            sigma_scale: 2.0,
            scratch: RefCell::default(),
            layout,
        };
        let theta: Vec<f64> = (0..model.dim()).map(|k| 0.3 * (k as f64).sin()).collect();
        let mut grad = vec![0.0; theta.len()];
        model.log_joint(&theta, &mut grad);
        let mut scratch = grad.clone();
        for k in 0..theta.len() {
            let h = 1e-6;
            let mut up = theta.clone();
            up[k] += h;
            let mut dn = theta.clone();
            dn[k] -= h;
            let fd = (model.log_joint(&up, &mut scratch) - model.log_joint(&dn, &mut scratch)) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-5 * fd.abs().max(1.0), "{k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn conjugate_mean_matches_analytic() {
        let (data, spec, post_mean) = conjugate();
        let fit = fit_vi(&data, &spec, &ViConfig { seed: 1, ..ViConfig::default() }).unwrap();
        let got = fit.marginals[0].mean;
        assert!((got - post_mean).abs() < 0.05 * spec.prior_beta_sd, "{got} vs {post_mean}");
    }

    #[test]
    fn elbo_improves_and_is_reproducible() {
        let data = hier_data(&HierConfig { n_entities: 8, n_years: 6, ..HierConfig::default() });
        let cfg = ViConfig { iters: 1000, seed: 4, ..ViConfig::default() };
        let a = fit_vi(&data, &BhmSpec::default(), &cfg).unwrap();
        let b = fit_vi(&data, &BhmSpec::default(), &cfg).unwrap();
        assert_eq!(a.elbo_trace, b.elbo_trace);
        let head = a.elbo_trace[..10].iter().sum::<f64>() / 10.0;
        let tail = a.elbo_trace[a.elbo_trace.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail >= head, "{head} -> {tail}");
        assert!(a.factors.iter().all(|f| f.log_sd.is_finite()));
    }

    #[test]
    fn agrees_with_mcmc_on_identified_panel() {
        let data = hier_data(&HierConfig::default());
        let spec = BhmSpec::default();
        let mc = posterior_summary(&fit_mcmc(&data, &spec, &McmcConfig { seed: 8, ..McmcConfig::default() }).unwrap());
        let vi = posterior_summary(&fit_vi(&data, &spec, &ViConfig { seed: 8, ..ViConfig::default() }).unwrap());
        for k in 0..2 {
            assert_eq!(mc[k].param, vi[k].param);
            assert!((mc[k].mean - vi[k].mean).abs() < 0.1 * mc[k].sd, "{}: {} vs {} (sd {})", mc[k].param, mc[k].mean, vi[k].mean, mc[k].sd);
        }
        let names: Vec<&str> = vi.iter().map(|s| s.param.as_str()).collect();
        let mc_names: Vec<&str> = mc.iter().map(|s| s.param.as_str()).collect();
        assert_eq!(names, mc_names);
        let gsum: f64 = vi.iter().filter(|s| s.param.starts_with("gamma[")).map(|s| s.mean).sum();
        assert!(gsum.abs() < 1e-9);
    }
}
