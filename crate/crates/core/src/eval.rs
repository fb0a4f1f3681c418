//! Edge-recovery metrics and regularization selection.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::model::{Dataset, SolverConfig, TopologyEstimate};
use crate::par;
use crate::solve::{predict, Method, Prepared};

fn check_adjacency(a: &DMatrix<u8>, name: &str) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::Validation(format!("{name} must be square")));
    }
    if a.iter().any(|&v| v > 1) {
        return Err(Error::Validation(format!("{name} must be binary")));
    }
    if (0..a.nrows()).any(|i| a[(i, i)] != 0) {
        return Err(Error::Validation(format!("{name} has a nonzero diagonal")));
    }
    Ok(())
}

/// Edge identification error rate in percent over the `N(N-1)` off-diagonal entries.
pub fn eier(truth: &DMatrix<u8>, estimate: &DMatrix<u8>) -> Result<f64> {
    check_adjacency(truth, "true adjacency")?;
    check_adjacency(estimate, "estimated adjacency")?;
    if truth.shape() != estimate.shape() {
        return Err(Error::DimensionMismatch(format!(
            "adjacency shapes differ: {:?} vs {:?}",
            truth.shape(),
            estimate.shape()
        )));
    }
    let n = truth.nrows();
    if n < 2 {
        return Err(Error::Validation("need at least 2 nodes".into()));
    }
    let wrong = truth.iter().zip(estimate.iter()).filter(|(a, b)| a != b).count();
    Ok(100.0 * wrong as f64 / (n * (n - 1)) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub p_fa: f64,
    pub p_d: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Off-diagonal `(score, is_edge)` pairs after validating both inputs.
fn scored_entries(scores: &DMatrix<f64>, truth: &DMatrix<u8>) -> Result<Vec<(f64, bool)>> {
    check_adjacency(truth, "true adjacency")?;
    if scores.shape() != truth.shape() {
        return Err(Error::DimensionMismatch(format!(
            "scores {:?} vs truth {:?}",
            scores.shape(),
            truth.shape()
        )));
    }
    let n = truth.nrows();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1));
    for j in 0..n {
        for i in 0..n {
            let s = scores[(i, j)];
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Validation(format!(
                    "score ({i},{j}) = {s} is not a finite nonnegative value"
                )));
            }
            if i == j {
                if s != 0.0 {
                    return Err(Error::Validation(format!("score diagonal ({i},{i}) is nonzero")));
                }
                continue;
            }
            out.push((s, truth[(i, j)] == 1));
        }
    }
    Ok(out)
}

/// Sweep `tau` over `{+inf} U unique scores U {0}` (edge iff score >= tau).
pub fn roc_curve(scores: &DMatrix<f64>, truth: &DMatrix<u8>) -> Result<RocCurve> {
    let mut entries = scored_entries(scores, truth)?;
    let pos = entries.iter().filter(|e| e.1).count();
    let neg = entries.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateTruth(format!("{pos} edges and {neg} non-edges")));
    }
    entries.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![RocPoint {
        p_fa: 0.0,
        p_d: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < entries.len() {
        let s = entries[k].0;
        while k < entries.len() && entries[k].0 == s {
            if entries[k].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push(RocPoint {
            p_fa: fp as f64 / neg as f64,
            p_d: tp as f64 / pos as f64,
            threshold: s,
        });
    }
    if points.last().map(|p| p.threshold) != Some(0.0) {
        points.push(RocPoint {
            p_fa: 1.0,
            p_d: 1.0,
            threshold: 0.0,
        });
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].p_fa - w[0].p_fa) * (w[1].p_d + w[0].p_d) * 0.5)
        .sum();
    Ok(RocCurve { points, auc })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdChoice {
    pub tau: f64,
    /// Mean EIER (percent) over the pooled instances at `tau`.
    pub eier: f64,
}

/// Threshold minimizing the mean EIER over several (scores, truth) pairs of
/// equal size. This tunes against the truth, so it is an oracle choice.
/// Ties go to the larger threshold.
pub fn tune_threshold(pairs: &[(&DMatrix<f64>, &DMatrix<u8>)]) -> Result<ThresholdChoice> {
    let Some(&(first, _)) = pairs.first() else {
        return Err(Error::Validation("no instances to tune on".into()));
    };
    let n = first.nrows();
    let mut entries = Vec::new();
    for &(s, t) in pairs {
        if s.nrows() != n {
            return Err(Error::DimensionMismatch("instances differ in node count".into()));
        }
        entries.extend(scored_entries(s, t)?);
    }
    entries.sort_by(|a, b| b.0.total_cmp(&a.0));
    let total = entries.len() as f64;
    let mut errors = entries.iter().filter(|e| e.1).count();
    let mut best = ThresholdChoice {
        tau: f64::INFINITY,
        eier: 100.0 * errors as f64 / total,
    };
    let mut k = 0;
    while k < entries.len() {
        let s = entries[k].0;
        while k < entries.len() && entries[k].0 == s {
            if entries[k].1 {
                errors -= 1;
            } else {
                errors += 1;
            }
            k += 1;
        }
        let e = 100.0 * errors as f64 / total;
        if e < best.eier {
            best = ThresholdChoice { tau: s, eier: e };
        }
    }
    Ok(best)
}

/// Smallest `lambda` at which every edge block of the solution is zero.
pub fn lambda_max(dataset: &Dataset, prepared: &Prepared) -> f64 {
    let blocks = match prepared {
        Prepared::Kernel(ks) => &ks.sqrt_per_node,
        Prepared::Poly(f) => &f.per_node,
    };
    let n = dataset.nodes();
    let mut best = 0.0f64;
    for j in 0..n {
        let x = dataset.x().column(j);
        let y = dataset.y().column(j);
        let r = y - x * (x.dot(&y) / x.norm_squared());
        for (i, f) in blocks.iter().enumerate() {
            if i != j {
                best = best.max(f.tr_mul(&r).norm());
            }
        }
    }
    best
}

#[derive(Debug)]
pub struct PathPoint {
    pub lambda: f64,
    pub result: Result<TopologyEstimate>,
}

impl PathPoint {
    pub fn edge_count(&self) -> Option<usize> {
        self.result.as_ref().ok().map(|e| e.edge_count())
    }
}

fn sorted_grid(grid: &[f64]) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(Error::Config("lambda grid is empty".into()));
    }
    if let Some(bad) = grid.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(Error::Config(format!("lambda {bad} is not a finite nonnegative value")));
    }
    let mut g = grid.to_vec();
    g.sort_by(f64::total_cmp);
    g.dedup();
    Ok(g)
}

/// One solve per `lambda` in ascending order, each warm-started from the
/// previous successful one. Failures are recorded and the path continues.
pub fn lambda_path(
    dataset: &Dataset,
    method: &Method,
    prepared: &Prepared,
    grid: &[f64],
    config: &SolverConfig,
) -> Result<Vec<PathPoint>> {
    let grid = sorted_grid(grid)?;
    let mut out: Vec<PathPoint> = Vec::with_capacity(grid.len());
    let mut warm: Option<TopologyEstimate> = None;
    for lambda in grid {
        let cfg = SolverConfig {
            lambda,
            ..config.clone()
        };
        let result = method.solve_prepared(dataset, prepared, &cfg, warm.as_ref());
        if let Ok(est) = &result {
            warm = Some(est.clone());
        }
        out.push(PathPoint { lambda, result });
    }
    Ok(out)
}

/// Seeded row permutation cut into `folds` near-equal held-out sets.
pub fn fold_indices(samples: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::Config("need at least 2 folds".into()));
    }
    if samples / folds < 2 {
        return Err(Error::Config(format!(
            "{samples} samples in {folds} folds leaves a fold with fewer than 2 samples"
        )));
    }
    if samples - samples.div_ceil(folds) < 2 {
        return Err(Error::Config("training split would have fewer than 2 samples".into()));
    }
    let mut order: Vec<usize> = (0..samples).collect();
    order.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let len = samples / folds + usize::from(f < samples % folds);
        let mut held: Vec<usize> = order[start..start + len].to_vec();
        held.sort_unstable();
        out.push(held);
        start += len;
    }
    Ok(out)
}

/// Complement of `held` in `0..samples`.
pub fn training_rows(samples: usize, held: &[usize]) -> Vec<usize> {
    let mut mask = vec![true; samples];
    for &h in held {
        mask[h] = false;
    }
    (0..samples).filter(|&i| mask[i]).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct CvResult {
    pub lambdas: Vec<f64>,
    /// `fold_scores[l][f]`: held-out loss of `lambdas[l]` on fold `f`.
    pub fold_scores: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub best_lambda: f64,
}

/// k-fold cross-validation of `lambda` by held-out least-squares loss
/// `1/2 ||Y_hold - Y_hat||^2`. Failed solves score `+inf`. Ties go to the
/// larger `lambda`.
pub fn cross_validate_lambda(
    dataset: &Dataset,
    method: &Method,
    grid: &[f64],
    folds: usize,
    config: &SolverConfig,
) -> Result<CvResult> {
    let lambdas = sorted_grid(grid)?;
    let splits = fold_indices(dataset.samples(), folds, config.rng_seed)?;
    let per_fold = par::map_range(config.execution, splits.len(), |f| -> Result<Vec<f64>> {
        let held = &splits[f];
        let train_rows = training_rows(dataset.samples(), held);
        debug_assert!(held.iter().all(|h| train_rows.binary_search(h).is_err()));
        let train = dataset.select_rows(&train_rows)?;
        let test = dataset.select_rows(held)?;
        let prepared = method.prepare(&train, config)?;
        let path = lambda_path(&train, method, &prepared, &lambdas, config)?;
        Ok(path
            .iter()
            .map(|p| match &p.result {
                Ok(est) => predict(method, est, &train, &test)
                    .map(|pred| 0.5 * (test.y() - pred).norm_squared())
                    .unwrap_or(f64::INFINITY),
                Err(_) => f64::INFINITY,
            })
            .collect())
    });
    let per_fold = per_fold.into_iter().collect::<Result<Vec<_>>>()?;
    let fold_scores: Vec<Vec<f64>> = (0..lambdas.len())
        .map(|l| per_fold.iter().map(|f| f[l]).collect())
        .collect();
    let mean: Vec<f64> = fold_scores
        .iter()
        .map(|s| s.iter().sum::<f64>() / s.len() as f64)
        .collect();
    Ok(CvResult {
        best_lambda: lambdas[select_lambda(&mean)],
        lambdas,
        fold_scores,
        mean,
    })
}

/// Index of the smallest mean over an ascending grid; ties go to the later
/// (larger) entry.
pub fn select_lambda(mean: &[f64]) -> usize {
    let mut best = 0;
    for l in 1..mean.len() {
        if mean[l] <= mean[best] {
            best = l;
        }
    }
    best
}

/// One-sided paired t-test p-value for `mean(a - b) > 0`.
pub fn paired_t_test_greater(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Validation(
            "paired test needs two equal samples of size >= 2".into(),
        ));
    }
    let d = DVector::from_iterator(a.len(), a.iter().zip(b).map(|(x, y)| x - y));
    let n = d.len() as f64;
    let mean = d.mean();
    let sd = d.variance() * n / (n - 1.0);
    let sd = sd.sqrt();
    if sd == 0.0 {
        return Ok(if mean > 0.0 { 0.0 } else { 1.0 });
    }
    let t = mean / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::Validation(e.to_string()))?;
    Ok(1.0 - dist.cdf(t))
}

pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}
