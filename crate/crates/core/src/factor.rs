//! Maximum-likelihood factor analysis `y = μ + Λf + ε`, `f ~ N(0, I_k)`,
//! `ε ~ N(0, Ψ)` with diagonal `Ψ`, fitted by EM.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::fmt_f64;
use crate::rng;

#[derive(Debug, Error)]
pub enum FactorError {
    #[error("covariance matrix is not positive definite")]
    SingularCovariance,
    #[error("k = {k} must satisfy 1 <= k < p = {p}")]
    KTooLarge { k: usize, p: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, FactorError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FactorConfig {
    pub max_iters: usize,
    /// Relative log-likelihood change that ends the iteration.
    pub tol: f64,
    /// Number of starts; start 0 is the principal-component start, later
    /// starts jitter it.
    pub n_starts: usize,
    pub jitter: f64,
    pub seed: u64,
}

impl Default for FactorConfig {
    fn default() -> Self {
        FactorConfig {
            max_iters: 1000,
            tol: 1e-8,
            n_starts: 1,
            jitter: 0.1,
            seed: 0,
        }
    }
}

impl FactorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || self.n_starts == 0 || !(self.tol >= 0.0) {
            return Err(FactorError::Invalid("max_iters and n_starts must be >= 1, tol >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    /// p × k
    pub loadings: DMatrix<f64>,
    pub uniquenesses: Vec<f64>,
    pub means: Vec<f64>,
    pub k: usize,
    pub loglik_trace: Vec<f64>,
    pub n_obs: usize,
    pub converged: bool,
    /// Which start produced this fit.
    pub start: usize,
}

impl FactorModel {
    /// `ΛΛᵀ + Ψ`
    pub fn implied_covariance(&self) -> DMatrix<f64> {
        let mut sigma = &self.loadings * self.loadings.transpose();
        for (j, psi) in self.uniquenesses.iter().enumerate() {
            sigma[(j, j)] += psi;
        }
        sigma
    }

    pub fn loglik(&self) -> f64 {
        self.loglik_trace.last().copied().unwrap_or(f64::NEG_INFINITY)
    }

    /// CSV `variable,f1..fk,uniqueness`.
    pub fn write_loadings_csv<W: Write>(&self, names: &[String], writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["variable".to_string()];
        header.extend((1..=self.k).map(|f| format!("f{f}")));
        header.push("uniqueness".into());
        w.write_record(&header)?;
        for j in 0..self.loadings.nrows() {
            let mut rec = vec![names.get(j).cloned().unwrap_or_else(|| format!("v{}", j + 1))];
            rec.extend((0..self.k).map(|f| fmt_f64(self.loadings[(j, f)])));
            rec.push(fmt_f64(self.uniquenesses[j]));
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Regression-method factor scores, n × k.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorScores {
    pub scores: DMatrix<f64>,
}

impl FactorScores {
    /// CSV `row,f1..fk`.
    pub fn write_csv<W: Write>(&self, labels: &[String], writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["row".to_string()];
        header.extend((1..=self.scores.ncols()).map(|f| format!("f{f}")));
        w.write_record(&header)?;
        for i in 0..self.scores.nrows() {
            let mut rec = vec![labels.get(i).cloned().unwrap_or_else(|| i.to_string())];
            rec.extend(self.scores.row(i).iter().map(|&v| fmt_f64(v)));
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

fn column_means(y: &DMatrix<f64>) -> Vec<f64> {
    (0..y.ncols()).map(|j| y.column(j).mean()).collect()
}

/// Maximum-likelihood (denominator n) covariance about `means`.
fn covariance(y: &DMatrix<f64>, means: &[f64]) -> DMatrix<f64> {
    let n = y.nrows();
    let c = DMatrix::from_fn(n, y.ncols(), |i, j| y[(i, j)] - means[j]);
    (c.transpose() * &c) / n as f64
}

fn cholesky(sigma: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(sigma).ok_or(FactorError::SingularCovariance)
}

/// Gaussian log-likelihood of n rows with ML covariance `s` under `N(·, Σ)`.
fn loglik_from_cov(sigma: &DMatrix<f64>, s: &DMatrix<f64>, n: usize) -> Result<f64> {
    let p = sigma.nrows() as f64;
    let chol = cholesky(sigma.clone())?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let trace = chol.solve(s).trace();
    Ok(-0.5 * n as f64 * (p * (2.0 * std::f64::consts::PI).ln() + logdet + trace))
}

/// Σ over rows of the log-density of `y` under `N(model.means, ΛΛᵀ + Ψ)`.
pub fn model_loglik(model: &FactorModel, y: &DMatrix<f64>) -> Result<f64> {
    let p = model.loadings.nrows();
    if y.ncols() != p {
        return Err(FactorError::ShapeMismatch(format!("model has {p} variables, data has {}", y.ncols())));
    }
    loglik_from_cov(&model.implied_covariance(), &covariance(y, &model.means), y.nrows())
}

/// `E[f | y] = Λᵀ(ΛΛᵀ + Ψ)⁻¹(y − μ)` for every row.
pub fn factor_scores(model: &FactorModel, y: &DMatrix<f64>) -> Result<FactorScores> {
    let p = model.loadings.nrows();
    if y.ncols() != p {
        return Err(FactorError::ShapeMismatch(format!("model has {p} variables, data has {}", y.ncols())));
    }
    let chol = cholesky(model.implied_covariance())?;
    let weights = chol.solve(&model.loadings); // Σ⁻¹Λ, p × k
    let centred = DMatrix::from_fn(y.nrows(), p, |i, j| y[(i, j)] - model.means[j]);
    Ok(FactorScores {
        scores: centred * weights,
    })
}

/// Loadings, uniquenesses, log-likelihood trace and convergence flag.
type EmFit = (DMatrix<f64>, Vec<f64>, Vec<f64>, bool);

fn em(
    s: &DMatrix<f64>,
    n: usize,
    mut lambda: DMatrix<f64>,
    floor: &[f64],
    cfg: &FactorConfig,
) -> Result<EmFit> {
    let (p, k) = lambda.shape();
    let mut psi: Vec<f64> = (0..p)
        .map(|j| (s[(j, j)] - lambda.row(j).norm_squared()).max(floor[j]))
        .collect();
    let implied = |lambda: &DMatrix<f64>, psi: &[f64]| {
        let mut sigma = lambda * lambda.transpose();
        for j in 0..p {
            sigma[(j, j)] += psi[j];
        }
        sigma
    };
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        // E-step: regression of factors on data and their second moment
        let chol = cholesky(implied(&lambda, &psi))?;
        let beta = chol.solve(&lambda).transpose(); // k × p
        let beta_s = &beta * s; // k × p
        let czz = DMatrix::identity(k, k) - &beta * &lambda + &beta_s * beta.transpose();
        // M-step
        let czz_chol = cholesky(czz)?;
        let new_lambda = czz_chol.solve(&beta_s).transpose(); // p × k
        let lb_s = &new_lambda * &beta_s; // p × p
        psi = (0..p).map(|j| (s[(j, j)] - lb_s[(j, j)]).max(floor[j])).collect();
        lambda = new_lambda;
        let ll = loglik_from_cov(&implied(&lambda, &psi), s, n)?;
        let prev = trace.last().copied();
        trace.push(ll);
        if let Some(prev) = prev {
            if (ll - prev).abs() <= cfg.tol * prev.abs().max(1.0) {
                converged = true;
                break;
            }
        }
    }
    Ok((lambda, psi, trace, converged))
}

/// Fits a k-factor model by EM from a principal-component start.
///
/// Data are centred on their column means. Uniquenesses are floored at
/// `1e-4 ×` the column variance. With `n_starts > 1` the extra starts jitter
/// the principal-component loadings and the fit with the highest final
/// log-likelihood wins (ties go to the lowest start index).
pub fn fit_em(y: &DMatrix<f64>, k: usize, cfg: &FactorConfig) -> Result<FactorModel> {
    let (n, p) = y.shape();
    if k == 0 || k >= p {
        return Err(FactorError::KTooLarge { k, p });
    }
    if n < 2 {
        return Err(FactorError::Invalid("need at least 2 rows".into()));
    }
    cfg.validate()?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(FactorError::Invalid("non-finite data".into()));
    }
    let means = column_means(y);
    let s = covariance(y, &means);
    let floor: Vec<f64> = (0..p).map(|j| 1e-4 * s[(j, j)]).collect();
    if floor.iter().any(|&f| !(f > 0.0)) {
        return Err(FactorError::SingularCovariance);
    }

    let eig = SymmetricEigen::new(s.clone());
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let pca = DMatrix::from_fn(p, k, |j, f| {
        let c = order[f];
        eig.eigenvectors[(j, c)] * eig.eigenvalues[c].max(0.0).sqrt()
    });

    let fits: Vec<Result<EmFit>> = (0..cfg.n_starts)
        .into_par_iter()
        .map(|start| {
            let mut init = pca.clone();
            if start > 0 {
                let mut rng = rng::stream(cfg.seed, start as u64);
                init.iter_mut().for_each(|v| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *v *= 1.0 + cfg.jitter * e;
                });
            }
            em(&s, n, init, &floor, cfg)
        })
        .collect();

    let mut best: Option<(usize, EmFit)> = None;
    for (start, fit) in fits.into_iter().enumerate() {
        let fit = fit?;
        let ll = *fit.2.last().unwrap_or(&f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(_, b)| ll > *b.2.last().unwrap_or(&f64::NEG_INFINITY)) {
            best = Some((start, fit));
        }
    }
    let (start, (loadings, uniquenesses, loglik_trace, converged)) = best.expect("at least one start");
    Ok(FactorModel {
        loadings,
        uniquenesses,
        means,
        k,
        loglik_trace,
        n_obs: n,
        converged,
        start,
    })
}

/// Random orthogonal k × k matrix (QR of a Gaussian matrix).
pub fn random_rotation(k: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng::stream(seed, rng::label_tag("rotation"));
    let g = DMatrix::from_fn(k, k, |_, _| StandardNormal.sample(&mut rng));
    g.qr().q()
}

/// `DVector` convenience for a single row's scores.
pub fn score_row(model: &FactorModel, row: &[f64]) -> Result<DVector<f64>> {
    let y = DMatrix::from_row_slice(1, row.len(), row);
    Ok(factor_scores(model, &y)?.scores.row(0).transpose())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_factor(n: usize, noise: f64, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = rng::seeded(seed);
        let f: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y = DMatrix::from_fn(n, 4, |i, _| f[i]);
        let y = y.map(|v| {
            let e: f64 = StandardNormal.sample(&mut rng);
            v + noise * e
        });
        (y, f)
    }

    fn gaussian(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng::seeded(seed);
        DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng))
    }

    fn nondecreasing(trace: &[f64]) -> bool {
        trace.windows(2).all(|w| w[1] >= w[0] - 1e-8 * w[0].abs().max(1.0))
    }

    #[test]
    fn recovers_single_loading_direction() {
        let (y, _) = one_factor(500, 0.1, 1);
        let m = fit_em(&y, 1, &FactorConfig::default()).unwrap();
        let l = m.loadings.column(0);
        let cos = l.sum() / (l.norm() * 2.0);
        assert!(cos.abs() > 0.99, "{cos}");
        assert!(nondecreasing(&m.loglik_trace));
    }

    #[test]
    fn noise_has_small_common_part() {
        // On a single null dataset the ML fit can drift to a near-Heywood
        // solution that explains one variable completely, so the claim is
        // checked on the median over independent datasets.
        let mut ratios: Vec<f64> = (0..10)
            .map(|seed| {
                let y = gaussian(1000, 5, 100 + seed);
                let m = fit_em(&y, 1, &FactorConfig::default()).unwrap();
                let common = &m.loadings * m.loadings.transpose();
                common.norm() / covariance(&y, &m.means).diagonal().norm()
            })
            .collect();
        ratios.sort_by(f64::total_cmp);
        let median = 0.5 * (ratios[4] + ratios[5]);
        assert!(median < 0.2, "{ratios:?}");
    }

    #[test]
    fn loglik_nondecreasing_across_inputs() {
        for seed in 0..5 {
            let y = gaussian(80, 6, 10 + seed);
            for k in 1..4 {
                let m = fit_em(&y, k, &FactorConfig { tol: 0.0, max_iters: 200, ..FactorConfig::default() }).unwrap();
                assert!(nondecreasing(&m.loglik_trace), "seed {seed} k {k}");
                assert!(m.uniquenesses.iter().all(|&u| u > 0.0));
            }
        }
    }

    #[test]
    fn zero_loadings_identity_uniqueness_matches_hand_formula() {
        let y = gaussian(30, 3, 4);
        let means = column_means(&y);
        let m = FactorModel {
            loadings: DMatrix::zeros(3, 1),
            uniquenesses: vec![1.0; 3],
            means: means.clone(),
            k: 1,
            loglik_trace: vec![],
            n_obs: 30,
            converged: true,
            start: 0,
        };
        let hand: f64 = y
            .row_iter()
            .flat_map(|r| (0..3).map(move |j| r[j]).collect::<Vec<_>>().into_iter().enumerate())
            .map(|(j, v)| -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * (v - means[j]).powi(2))
            .sum();
        assert!((model_loglik(&m, &y).unwrap() - hand).abs() < 1e-9);
    }

    #[test]
    fn duplicated_row_adds_its_density() {
        let y = gaussian(40, 3, 5);
        let m = fit_em(&y, 1, &FactorConfig::default()).unwrap();
        let base = model_loglik(&m, &y).unwrap();
        let row = DMatrix::from_rows(&[y.row(3).into_owned()]);
        let single = model_loglik(&m, &row).unwrap();
        let mut rows: Vec<_> = y.row_iter().map(|r| r.into_owned()).collect();
        rows.push(y.row(3).into_owned());
        let extended = DMatrix::from_rows(&rows);
        assert!((model_loglik(&m, &extended).unwrap() - base - single).abs() < 1e-9);
    }

    #[test]
    fn fitted_beats_zero_loading_baseline() {
        let (y, _) = one_factor(200, 0.5, 6);
        let m = fit_em(&y, 1, &FactorConfig::default()).unwrap();
        let s = covariance(&y, &m.means);
        let baseline = FactorModel {
            loadings: DMatrix::zeros(4, 1),
            uniquenesses: (0..4).map(|j| s[(j, j)]).collect(),
            ..m.clone()
        };
        assert!(model_loglik(&m, &y).unwrap() >= model_loglik(&baseline, &y).unwrap());
    }

    #[test]
    fn rotation_leaves_loglik_unchanged() {
        let y = gaussian(200, 6, 7);
        let m = fit_em(&y, 3, &FactorConfig::default()).unwrap();
        let base = model_loglik(&m, &y).unwrap();
        for seed in 0..5 {
            let q = random_rotation(3, seed);
            let rotated = FactorModel {
                loadings: &m.loadings * q,
                ..m.clone()
            };
            assert!((model_loglik(&rotated, &y).unwrap() - base).abs() < 1e-9);
        }
    }

    #[test]
    fn scores_behaviour() {
        let (y, f) = one_factor(300, 0.01, 8);
        let m = fit_em(&y, 1, &FactorConfig::default()).unwrap();
        let at_mean = DMatrix::from_fn(2, 4, |_, j| m.means[j]);
        assert!(factor_scores(&m, &at_mean).unwrap().scores.iter().all(|v| v.abs() < 1e-12));

        let s = factor_scores(&m, &y).unwrap().scores;
        let sv: Vec<f64> = s.column(0).iter().copied().collect();
        let corr = correlation(&sv, &f);
        assert!(corr.abs() > 0.999, "{corr}");

        let flipped = FactorModel {
            loadings: -m.loadings.clone(),
            ..m.clone()
        };
        let s2 = factor_scores(&flipped, &y).unwrap().scores;
        assert_eq!(s2, -s);
        assert!(matches!(factor_scores(&m, &gaussian(3, 2, 1)), Err(FactorError::ShapeMismatch(_))));
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn implied_diagonal_matches_sample_variance() {
        let mut rng = rng::seeded(9);
        let lam = DMatrix::from_fn(6, 2, |_, _| StandardNormal.sample(&mut rng));
        let f = gaussian(2000, 2, 10);
        let e = gaussian(2000, 6, 11) * 0.5;
        let y = f * lam.transpose() + e;
        let m = fit_em(&y, 2, &FactorConfig::default()).unwrap();
        let s = covariance(&y, &m.means);
        let implied = m.implied_covariance();
        for j in 0..6 {
            assert!((implied[(j, j)] - s[(j, j)]).abs() < 0.1 * s[(j, j)]);
        }
    }

    #[test]
    fn multi_start_is_deterministic_and_not_worse() {
        let y = gaussian(100, 5, 12);
        let cfg = FactorConfig { n_starts: 4, seed: 3, ..FactorConfig::default() };
        let a = fit_em(&y, 2, &cfg).unwrap();
        let b = fit_em(&y, 2, &cfg).unwrap();
        assert_eq!(a, b);
        let single = fit_em(&y, 2, &FactorConfig::default()).unwrap();
        assert!(a.loglik() >= single.loglik());
    }

    #[test]
    fn k_bounds() {
        let y = gaussian(10, 3, 1);
        assert!(matches!(fit_em(&y, 0, &FactorConfig::default()), Err(FactorError::KTooLarge { .. })));
        assert!(matches!(fit_em(&y, 3, &FactorConfig::default()), Err(FactorError::KTooLarge { .. })));
    }
}
