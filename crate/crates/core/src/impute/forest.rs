//! Bagged regression trees.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ImputeError, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features tried per split; 0 means `max(1, p / 3)`.
    pub mtry: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            max_depth: 16,
            min_leaf: 2,
            mtry: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, row: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if row[feature] <= threshold { left } else { right },
            }
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.min_leaf == 0 {
            return Err(ImputeError::InvalidConfig("n_trees and min_leaf must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ForestModel {
    trees: Vec<Tree>,
    n_features: usize,
}

impl ForestModel {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }
}

struct Builder<'a> {
    rows: Vec<Vec<f64>>,
    y: &'a [f64],
    cfg: &'a ForestConfig,
    mtry: usize,
}

impl Builder<'_> {
    fn grow(&self, idx: &mut [usize], depth: usize, nodes: &mut Vec<Node>, rng: &mut rng::Rng) -> usize {
        let n = idx.len();
        let sum: f64 = idx.iter().map(|&i| self.y[i]).sum();
        let mean = sum / n as f64;
        let at = nodes.len();
        nodes.push(Node::Leaf(mean));

        let pure = idx.iter().all(|&i| self.y[i] == self.y[idx[0]]);
        if depth >= self.cfg.max_depth || n < 2 * self.cfg.min_leaf || pure {
            return at;
        }
        let Some((feature, threshold)) = self.best_split(idx, sum, rng) else {
            return at;
        };
        let mut split = 0;
        for k in 0..n {
            if self.rows[idx[k]][feature] <= threshold {
                idx.swap(k, split);
                split += 1;
            }
        }
        let (l, r) = idx.split_at_mut(split);
        let left = self.grow(l, depth + 1, nodes, rng);
        let right = self.grow(r, depth + 1, nodes, rng);
        nodes[at] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        at
    }

    /// Largest reduction in squared error over `mtry` random features.
    fn best_split(&self, idx: &[usize], total: f64, rng: &mut rng::Rng) -> Option<(usize, f64)> {
        let n = idx.len();
        let p = self.rows[0].len();
        let min_leaf = self.cfg.min_leaf;
        let base = total * total / n as f64;
        let mut best: Option<(f64, usize, f64)> = None;
        let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(n);
        for feature in index::sample(rng, p, self.mtry.min(p)) {
            pairs.clear();
            pairs.extend(idx.iter().map(|&i| (self.rows[i][feature], self.y[i])));
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left = 0.0;
            for k in 1..n {
                left += pairs[k - 1].1;
                if k < min_leaf || n - k < min_leaf || pairs[k - 1].0 == pairs[k].0 {
                    continue;
                }
                let right = total - left;
                let gain = left * left / k as f64 + right * right / (n - k) as f64 - base;
                if gain > 1e-12 * base.abs().max(1.0) && best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, feature, 0.5 * (pairs[k - 1].0 + pairs[k].0)));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

fn rows_of(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect()
}

/// Fits `n_trees` CART regression trees on bootstrap resamples.
///
/// Tree `k` draws from its own random stream derived from `(seed, k)`, so the
/// fit is identical whether trees are grown in parallel or one by one.
pub fn fit_forest(x: &DMatrix<f64>, y: &[f64], cfg: &ForestConfig) -> Result<ForestModel> {
    let (n, p) = x.shape();
    if n != y.len() {
        return Err(ImputeError::ShapeMismatch(format!("{n} rows vs {} targets", y.len())));
    }
    if p == 0 {
        return Err(ImputeError::ShapeMismatch("no features".into()));
    }
    cfg.validate()?;
    if n < 2 * cfg.min_leaf {
        return Err(ImputeError::TooFewRows {
            rows: n,
            needed: 2 * cfg.min_leaf,
        });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(ImputeError::NonFinite("forest inputs".into()));
    }
    let mtry = if cfg.mtry == 0 { (p / 3).max(1) } else { cfg.mtry };
    let builder = Builder {
        rows: rows_of(x),
        y,
        cfg,
        mtry,
    };
    let trees = (0..cfg.n_trees)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng::stream(cfg.seed, k as u64 + 1);
            let mut idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let mut nodes = Vec::new();
            builder.grow(&mut idx, 0, &mut nodes, &mut rng);
            Tree { nodes }
        })
        .collect();
    Ok(ForestModel { trees, n_features: p })
}

/// Mean of the tree predictions for each row of `x`.
pub fn predict_forest(model: &ForestModel, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    if x.ncols() != model.n_features {
        return Err(ImputeError::ShapeMismatch(format!(
            "model has {} features, input has {}",
            model.n_features,
            x.ncols()
        )));
    }
    let k = model.trees.len() as f64;
    Ok(rows_of(x)
        .iter()
        .map(|row| model.trees.iter().map(|t| t.predict(row)).sum::<f64>() / k)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Uniform};

    fn r2(y: &[f64], pred: &[f64]) -> f64 {
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
        let ss_res: f64 = y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum();
        1.0 - ss_res / ss_tot
    }

    fn data(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng::seeded(seed);
        let u = Uniform::new(-3.0, 3.0).unwrap();
        DMatrix::from_fn(n, p, |_, _| u.sample(&mut rng))
    }

    #[test]
    fn constant_target_gives_constant_predictor() {
        let x = data(50, 3, 1);
        let y = vec![7.0; 50];
        let model = fit_forest(&x, &y, &ForestConfig::default()).unwrap();
        let pred = predict_forest(&model, &data(10, 3, 2)).unwrap();
        assert!(pred.iter().all(|&v| v == 7.0));
    }

    #[test]
    fn identity_target_fits_in_sample() {
        let x = data(200, 1, 3);
        let y: Vec<f64> = x.column(0).iter().copied().collect();
        let cfg = ForestConfig {
            n_trees: 50,
            max_depth: 30,
            min_leaf: 1,
            ..ForestConfig::default()
        };
        let model = fit_forest(&x, &y, &cfg).unwrap();
        let pred = predict_forest(&model, &x).unwrap();
        assert!(r2(&y, &pred) > 0.95, "{}", r2(&y, &pred));
    }

    #[test]
    fn seeded_fit_is_deterministic() {
        let x = data(80, 4, 5);
        let y: Vec<f64> = (0..80).map(|i| x[(i, 0)] * x[(i, 1)] + x[(i, 2)]).collect();
        let cfg = ForestConfig { seed: 42, ..ForestConfig::default() };
        let a = predict_forest(&fit_forest(&x, &y, &cfg).unwrap(), &x).unwrap();
        let b = predict_forest(&fit_forest(&x, &y, &cfg).unwrap(), &x).unwrap();
        assert_eq!(a, b);
        let c = predict_forest(&fit_forest(&x, &y, &ForestConfig { seed: 43, ..cfg }).unwrap(), &x).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn parallel_matches_single_thread() {
        let x = data(60, 3, 8);
        let y: Vec<f64> = (0..60).map(|i| x[(i, 2)].sin()).collect();
        let cfg = ForestConfig { n_trees: 16, seed: 3, ..ForestConfig::default() };
        let par = predict_forest(&fit_forest(&x, &y, &cfg).unwrap(), &x).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let seq = pool.install(|| predict_forest(&fit_forest(&x, &y, &cfg).unwrap(), &x).unwrap());
        assert_eq!(par, seq);
    }

    #[test]
    fn shape_errors() {
        let x = data(10, 2, 1);
        assert!(matches!(fit_forest(&x, &[1.0; 9], &ForestConfig::default()), Err(ImputeError::ShapeMismatch(_))));
        let model = fit_forest(&x, &[1.0; 10], &ForestConfig::default()).unwrap();
        assert!(matches!(predict_forest(&model, &data(3, 5, 1)), Err(ImputeError::ShapeMismatch(_))));
        let cfg = ForestConfig { min_leaf: 6, ..ForestConfig::default() };
        assert!(matches!(fit_forest(&x, &[1.0; 10], &cfg), Err(ImputeError::TooFewRows { .. })));
    }
}
