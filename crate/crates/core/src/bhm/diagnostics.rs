//! Convergence diagnostics: rank-normalised split R̂ and bulk effective
//! sample size.

use statrs::distribution::{ContinuousCDF, Normal};

use super::{BhmError, PosteriorSamples, Result};

const MIN_CHAINS: usize = 2;
const MIN_DRAWS: usize = 10;

fn check(chains: &[Vec<f64>]) -> Result<usize> {
    if chains.len() < MIN_CHAINS {
        return Err(BhmError::InsufficientDraws(format!("{} chain(s); need {MIN_CHAINS}", chains.len())));
    }
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if n < MIN_DRAWS || chains.iter().any(|c| c.len() != n) {
        return Err(BhmError::InsufficientDraws(format!(
            "chains need at least {MIN_DRAWS} draws each and equal lengths"
        )));
    }
    Ok(n)
}

/// Splits every chain into its first and second halves (dropping the middle
/// draw of odd-length chains).
fn split(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let half = chains[0].len() / 2;
    let n = chains[0].len();
    chains
        .iter()
        .flat_map(|c| [c[..half].to_vec(), c[n - half..].to_vec()])
        .collect()
}

/// Replaces every draw by the normal score of its pooled rank
/// (average ranks for ties, Blom offset 3/8).
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let pooled: Vec<(usize, usize, f64)> = chains
        .iter()
        .enumerate()
        .flat_map(|(c, ch)| ch.iter().enumerate().map(move |(i, &v)| (c, i, v)))
        .collect();
    let s = pooled.len();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| pooled[a].2.total_cmp(&pooled[b].2));
    let mut ranks = vec![0.0; s];
    let mut k = 0;
    while k < s {
        let mut e = k;
        while e + 1 < s && pooled[order[e + 1]].2 == pooled[order[k]].2 {
            e += 1;
        }
        let avg = (k + e) as f64 / 2.0 + 1.0;
        for &o in &order[k..=e] {
            ranks[o] = avg;
        }
        k = e + 1;
    }
    let normal = Normal::standard();
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    for (idx, &(c, i, _)) in pooled.iter().enumerate() {
        out[c][i] = normal.inverse_cdf((ranks[idx] - 0.375) / (s as f64 + 0.25));
    }
    out
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Classic potential scale reduction over equal-length chains.
fn basic_rhat(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let stats: Vec<(f64, f64)> = chains.iter().map(|c| mean_var(c)).collect();
    let w = stats.iter().map(|s| s.1).sum::<f64>() / stats.len() as f64;
    let means: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let b_over_n = mean_var(&means).1;
    if w <= 0.0 {
        // every chain is constant: identical constants agree perfectly
        return if b_over_n <= 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * w + b_over_n;
    (var_plus / w).sqrt()
}

/// Rank-normalised split R̂: the larger of the bulk value and the value on
/// draws folded about their median.
pub fn rhat_of(chains: &[Vec<f64>]) -> Result<f64> {
    check(chains)?;
    let halves = split(chains);
    let bulk = basic_rhat(&rank_normalize(&halves));
    let mut pooled: Vec<f64> = halves.concat();
    pooled.sort_by(f64::total_cmp);
    let median = super::quantile_sorted(&pooled, 0.5);
    let folded: Vec<Vec<f64>> = halves
        .iter()
        .map(|c| c.iter().map(|v| (v - median).abs()).collect())
        .collect();
    let tail = basic_rhat(&rank_normalize(&folded));
    Ok(bulk.max(tail))
}

/// Effective sample size of equal-length chains using Geyer's initial
/// monotone sequence on the multi-chain autocorrelation.
fn ess_raw(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    let nf = n as f64;
    let stats: Vec<(f64, f64)> = chains.iter().map(|c| mean_var(c)).collect();
    let w = stats.iter().map(|s| s.1).sum::<f64>() / m as f64;
    let means: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let var_plus = (nf - 1.0) / nf * w + mean_var(&means).1;
    if !(var_plus > 0.0) {
        return (m * n) as f64;
    }
    // biased autocovariance of each chain at lag t, averaged over chains
    let acov = |t: usize| -> f64 {
        chains
            .iter()
            .zip(&means)
            .map(|(c, &mu)| (0..n - t).map(|i| (c[i] - mu) * (c[i + t] - mu)).sum::<f64>() / nf)
            .sum::<f64>()
            / m as f64
    };
    let rho = |t: usize| -> f64 { 1.0 - (w - acov(t)) / var_plus };
    let mut rhos = vec![1.0, rho(1)];
    let mut t = 1;
    while t + 2 < n {
        let even = rho(t + 1);
        let odd = rho(t + 2);
        if even + odd <= 0.0 {
            break;
        }
        rhos.push(even);
        rhos.push(odd);
        t += 2;
    }
    // pair sums must be positive and non-increasing
    let mut pairs: Vec<f64> = rhos.chunks(2).map(|p| p.iter().sum()).collect();
    for k in 1..pairs.len() {
        if pairs[k] > pairs[k - 1] {
            pairs[k] = pairs[k - 1];
        }
    }
    let tau = (-1.0 + 2.0 * pairs.iter().filter(|&&p| p > 0.0).sum::<f64>()).max(1.0 / ((m * n) as f64).log10());
    (m * n) as f64 / tau
}

/// Bulk effective sample size: ESS of the rank-normalised split chains.
pub fn ess_of(chains: &[Vec<f64>]) -> Result<f64> {
    check(chains)?;
    let halves = split(chains);
    if halves.iter().flatten().all(|&v| v == halves[0][0]) {
        return Ok((halves.len() * halves[0].len()) as f64);
    }
    Ok(ess_raw(&rank_normalize(&halves)))
}

pub fn rhat(samples: &PosteriorSamples, param: &str) -> Result<f64> {
    rhat_of(&samples.param(param)?)
}

pub fn ess(samples: &PosteriorSamples, param: &str) -> Result<f64> {
    ess_of(&samples.param(param)?)
}
