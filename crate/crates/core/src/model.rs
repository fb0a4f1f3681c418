//! Domain types shared by every solver.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, DVectorView, DVectorViewMut};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{KernelSet, Ridge};
use crate::par::Execution;

/// Endogenous `Y` and exogenous `X` measurements, samples by nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DMatrix<f64>,
    x: DMatrix<f64>,
    labels: Option<Vec<String>>,
}

pub fn validate_dataset(y: DMatrix<f64>, x: DMatrix<f64>) -> Result<Dataset> {
    if y.shape() != x.shape() {
        return Err(Error::DimensionMismatch(format!(
            "Y is {}x{} but X is {}x{}",
            y.nrows(),
            y.ncols(),
            x.nrows(),
            x.ncols()
        )));
    }
    let (m, n) = y.shape();
    if m < 2 || n < 2 {
        return Err(Error::Validation(format!(
            "need at least 2 samples and 2 nodes, got {m}x{n}"
        )));
    }
    for (name, mat) in [("Y", &y), ("X", &x)] {
        if let Some(pos) = mat.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                matrix: name,
                row: pos % m,
                column: pos / m,
            });
        }
    }
    if let Some(column) = (0..n).find(|&j| x.column(j).norm_squared() == 0.0) {
        return Err(Error::ZeroExogenousColumn { column });
    }
    Ok(Dataset { y, x, labels: None })
}

impl Dataset {
    pub fn new(y: DMatrix<f64>, x: DMatrix<f64>) -> Result<Self> {
        validate_dataset(y, x)
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.nodes() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} nodes",
                labels.len(),
                self.nodes()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn samples(&self) -> usize {
        self.y.nrows()
    }

    pub fn nodes(&self) -> usize {
        self.y.ncols()
    }

    /// Row subset, keeping node labels.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Dataset> {
        let y = self.y.select_rows(rows);
        let x = self.x.select_rows(rows);
        let mut d = validate_dataset(y, x)?;
        d.labels = self.labels.clone();
        Ok(d)
    }
}

/// `N x N` grid of equal-length blocks stored column by column: column `j`
/// stacks blocks `(0, j), ..., (N-1, j)`. Diagonal blocks stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrid {
    n: usize,
    d: usize,
    columns: Vec<DVector<f64>>,
}

impl BlockGrid {
    pub fn zeros(n: usize, d: usize) -> Self {
        BlockGrid {
            n,
            d,
            columns: vec![DVector::zeros(n * d); n],
        }
    }

    pub fn from_columns(n: usize, d: usize, columns: Vec<DVector<f64>>) -> Result<Self> {
        if columns.len() != n || columns.iter().any(|c| c.len() != n * d) {
            return Err(Error::DimensionMismatch(format!(
                "block grid needs {n} columns of length {}",
                n * d
            )));
        }
        let mut g = BlockGrid { n, d, columns };
        for j in 0..n {
            g.block_mut(j, j).fill(0.0);
        }
        Ok(g)
    }

    pub fn nodes(&self) -> usize {
        self.n
    }

    pub fn block_len(&self) -> usize {
        self.d
    }

    pub fn block(&self, i: usize, j: usize) -> DVectorView<'_, f64> {
        self.columns[j].rows(i * self.d, self.d)
    }

    pub fn block_mut(&mut self, i: usize, j: usize) -> DVectorViewMut<'_, f64> {
        self.columns[j].rows_mut(i * self.d, self.d)
    }

    pub fn column(&self, j: usize) -> &DVector<f64> {
        &self.columns[j]
    }

    pub fn columns(&self) -> &[DVector<f64>] {
        &self.columns
    }

    pub fn columns_mut(&mut self) -> &mut [DVector<f64>] {
        &mut self.columns
    }

    pub fn set_column(&mut self, j: usize, col: DVector<f64>) {
        assert_eq!(col.len(), self.n * self.d);
        self.columns[j] = col;
        self.block_mut(j, j).fill(0.0);
    }

    /// `N x N` matrix of block Euclidean norms (zero diagonal).
    pub fn block_norms(&self) -> DMatrix<f64> {
        DMatrix::from_fn(
            self.n,
            self.n,
            |i, j| {
                if i == j {
                    0.0
                } else {
                    self.block(i, j).norm()
                }
            },
        )
    }

    pub fn diagonal_is_zero(&self) -> bool {
        (0..self.n).all(|j| self.block(j, j).iter().all(|&v| v == 0.0))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.columns.iter().map(|c| c.norm_squared()).sum::<f64>().sqrt()
    }

    /// Apply a per-node linear map to every block: `out_ij = maps[i] * block_ij`.
    pub fn map_blocks(&self, maps: &[DMatrix<f64>]) -> BlockGrid {
        let d_out = maps.first().map_or(self.d, |mm| mm.nrows());
        let mut out = BlockGrid::zeros(self.n, d_out);
        for j in 0..self.n {
            for i in 0..self.n {
                if i != j {
                    let v = &maps[i] * self.block(i, j);
                    out.block_mut(i, j).copy_from(&v);
                }
            }
        }
        out
    }
}

/// Per-edge kernel expansion coefficients `alpha_ij` (length `M`).
#[derive(Debug, Clone, PartialEq)]
pub struct DualCoefficients {
    pub blocks: BlockGrid,
}

/// Per-edge polynomial coefficients `w_ij` (length `P`) and exogenous loadings.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyCoefficients {
    pub blocks: BlockGrid,
    pub b_diag: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Coefficients {
    Dual(DualCoefficients),
    Poly(PolyCoefficients),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Admm,
    Pg,
    Apg,
    Poly,
    Linear,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Admm => "admm",
            SolverKind::Pg => "pg",
            SolverKind::Apg => "apg",
            SolverKind::Poly => "poly",
            SolverKind::Linear => "linear",
        }
    }

    pub fn uses_kernel(self) -> bool {
        matches!(self, SolverKind::Admm | SolverKind::Pg | SolverKind::Apg)
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "admm" => SolverKind::Admm,
            "pg" => SolverKind::Pg,
            "apg" => SolverKind::Apg,
            "poly" => SolverKind::Poly,
            "linear" => SolverKind::Linear,
            _ => return Err(Error::Config(format!("unknown solver `{s}`"))),
        })
    }
}

/// Which block norm becomes the edge score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreRule {
    /// The solver's own variable: `alpha` for ADMM, `zeta` for (A)PG, `w` for polynomial.
    #[default]
    Native,
    /// `||K_i^{1/2} alpha_ij||`, comparable across solvers.
    KernelWeighted,
}

impl FromStr for ScoreRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "native" => Ok(ScoreRule::Native),
            "kernel_weighted" | "kernel-weighted" => Ok(ScoreRule::KernelWeighted),
            _ => Err(Error::Config(format!("unknown score rule `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub lambda: f64,
    pub rho: f64,
    pub tau: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub ridge: Ridge,
    pub score_rule: ScoreRule,
    pub rng_seed: u64,
    #[serde(default)]
    pub execution: Execution,
    /// Keep the per-iteration objective values in the estimate meta.
    #[serde(default)]
    pub record_trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            lambda: 0.1,
            rho: 1.0,
            tau: 1e-3,
            max_iters: 2000,
            tol: 1e-6,
            ridge: Ridge::default(),
            score_rule: ScoreRule::Native,
            rng_seed: 0,
            execution: Execution::Parallel,
            record_trace: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::Config(format!("{what} invalid: {v}")));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", self.lambda);
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad("rho", self.rho);
        }
        if !(self.tol > 0.0) {
            return bad("tol", self.tol);
        }
        if !(self.tau >= 0.0) {
            return bad("tau", self.tau);
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateMeta {
    pub solver: SolverKind,
    pub iterations: usize,
    pub objective: f64,
    pub converged: bool,
    pub tau: f64,
    pub lambda: f64,
    pub score_rule: ScoreRule,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objective_trace: Vec<f64>,
}

/// ADMM split and multiplier variables, kept for warm starts.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmAux {
    pub gamma: BlockGrid,
    pub duals: BlockGrid,
}

#[derive(Debug, Clone)]
pub struct TopologyEstimate {
    pub adjacency: DMatrix<u8>,
    pub scores: DMatrix<f64>,
    pub b_diag: DVector<f64>,
    pub coefficients: Coefficients,
    /// The variable the solver iterated on (`alpha`, `zeta` or `w`).
    pub native: BlockGrid,
    pub admm_aux: Option<AdmmAux>,
    pub meta: EstimateMeta,
}

impl TopologyEstimate {
    /// Re-threshold the existing scores.
    pub fn with_threshold(mut self, tau: f64) -> Self {
        self.adjacency = edges_from_scores(&self.scores, tau);
        self.meta.tau = tau;
        self
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|&&a| a == 1).count()
    }
}

/// `a_ij = 1` iff `scores_ij >= tau`; the diagonal is never an edge.
pub fn edges_from_scores(scores: &DMatrix<f64>, tau: f64) -> DMatrix<u8> {
    DMatrix::from_fn(scores.nrows(), scores.ncols(), |i, j| {
        u8::from(i != j && scores[(i, j)] >= tau)
    })
}

/// Residual `y_j - sum_{i != j} K_i alpha_ij - b_jj x_j` for one column.
pub fn kernel_column_residual(
    dataset: &Dataset,
    kernels: &KernelSet,
    alpha: &BlockGrid,
    b: f64,
    j: usize,
) -> DVector<f64> {
    let mut r = dataset.y().column(j) - dataset.x().column(j) * b;
    for i in 0..dataset.nodes() {
        if i != j {
            r -= &kernels.per_node[i] * alpha.block(i, j);
        }
    }
    r
}

/// `1/2 ||Y - K~ W_alpha - X B||_F^2 + lambda sum_{i != j} ||K_i^{1/2} alpha_ij||`.
pub fn objective_value(
    dataset: &Dataset,
    kernels: &KernelSet,
    coeffs: &DualCoefficients,
    b_diag: &DVector<f64>,
    lambda: f64,
) -> f64 {
    let n = dataset.nodes();
    let mut fit = 0.0;
    let mut reg = 0.0;
    for j in 0..n {
        fit += 0.5 * kernel_column_residual(dataset, kernels, &coeffs.blocks, b_diag[j], j).norm_squared();
        for i in 0..n {
            if i != j {
                reg += (&kernels.sqrt_per_node[i] * coeffs.blocks.block(i, j)).norm();
            }
        }
    }
    fit + lambda * reg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{build_kernel_set, KernelSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Dataset {
        let y = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let x = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        Dataset::new(y, x).unwrap()
    }

    fn random_grid(rng: &mut ChaCha8Rng, n: usize, d: usize) -> BlockGrid {
        let cols = (0..n)
            .map(|_| DVector::from_fn(n * d, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        BlockGrid::from_columns(n, d, cols).unwrap()
    }

    #[test]
    fn validation() {
        let ok = Dataset::new(DMatrix::from_element(4, 3, 1.0), DMatrix::from_element(4, 3, 1.0));
        assert!(ok.is_ok());
        let mismatch = Dataset::new(DMatrix::from_element(4, 3, 1.0), DMatrix::from_element(5, 3, 1.0));
        assert!(matches!(mismatch, Err(Error::DimensionMismatch(_))));
        let mut x = DMatrix::from_element(4, 3, 1.0);
        x.column_mut(2).fill(0.0);
        let zero = Dataset::new(DMatrix::from_element(4, 3, 1.0), x);
        assert!(matches!(zero, Err(Error::ZeroExogenousColumn { column: 2 })));
        let mut y = DMatrix::from_element(4, 3, 1.0);
        y[(1, 2)] = f64::NAN;
        let nan = Dataset::new(y, DMatrix::from_element(4, 3, 1.0));
        assert!(matches!(
            nan,
            Err(Error::NonFinite {
                matrix: "Y",
                row: 1,
                column: 2
            })
        ));
    }

    #[test]
    fn edges_examples() {
        let zeros = DMatrix::zeros(3, 3);
        assert_eq!(edges_from_scores(&zeros, 0.1), DMatrix::<u8>::zeros(3, 3));
        let mut s = DMatrix::zeros(3, 3);
        s[(0, 1)] = 0.5;
        let a = edges_from_scores(&s, 0.5);
        assert_eq!(a.iter().map(|&v| v as usize).sum::<usize>(), 1);
        assert_eq!(a[(0, 1)], 1);
    }

    #[test]
    fn edges_match_enumeration_at_median() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = DMatrix::from_fn(3, 3, |_, _| rng.random_range(0.0..1.0));
        s.fill_diagonal(0.0);
        let mut off: Vec<f64> = (0..3)
            .flat_map(|i| (0..3).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| s[(i, j)])
            .collect();
        off.sort_by(f64::total_cmp);
        let tau = 0.5 * (off[2] + off[3]);
        let a = edges_from_scores(&s, tau);
        for i in 0..3 {
            for j in 0..3 {
                let expect = i != j && s[(i, j)] >= tau;
                assert_eq!(a[(i, j)] == 1, expect);
            }
        }
    }

    proptest! {
        #[test]
        fn zero_threshold_marks_positive_scores(vals in proptest::collection::vec(0.0f64..1.0, 16)) {
            let mut s = DMatrix::from_vec(4, 4, vals);
            s.fill_diagonal(0.0);
            let a = edges_from_scores(&s, 0.0);
            for i in 0..4 {
                prop_assert_eq!(a[(i, i)], 0);
                for j in 0..4 {
                    if i != j && s[(i, j)] > 0.0 {
                        prop_assert_eq!(a[(i, j)], 1);
                    }
                }
            }
        }
    }

    #[test]
    fn objective_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ds = random_dataset(&mut rng, 4, 3);
        let ks = build_kernel_set(
            &KernelSpec::Polynomial { order: 2 },
            ds.y(),
            Ridge::Absolute(0.0),
            Execution::Sequential,
        )
        .unwrap();
        let zero = DualCoefficients {
            blocks: BlockGrid::zeros(3, 4),
        };
        let b0 = DVector::zeros(3);
        let v = objective_value(&ds, &ks, &zero, &b0, 0.3);
        assert!((v - 0.5 * ds.y().norm_squared()).abs() < 1e-12);

        let coeffs = DualCoefficients {
            blocks: random_grid(&mut rng, 3, 4),
        };
        let b = DVector::from_vec(vec![0.3, -0.2, 0.9]);
        let pure = objective_value(&ds, &ks, &coeffs, &b, 0.0);
        let resid = ds.y() - ks.concat() * dense_w(&coeffs.blocks) - ds.x() * DMatrix::from_diagonal(&b);
        assert!((pure - 0.5 * resid.norm_squared()).abs() < 1e-10);
    }

    fn dense_w(g: &BlockGrid) -> DMatrix<f64> {
        let (n, d) = (g.nodes(), g.block_len());
        DMatrix::from_fn(n * d, n, |r, j| g.block(r / d, j)[r % d])
    }

    #[test]
    fn objective_matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ds = random_dataset(&mut rng, 4, 3);
        let spec = KernelSpec::Gaussian { bandwidth: 0.5 };
        let ks = build_kernel_set(&spec, ds.y(), Ridge::Absolute(0.0), Execution::Sequential).unwrap();
        let coeffs = DualCoefficients {
            blocks: random_grid(&mut rng, 3, 4),
        };
        let b = DVector::from_vec(vec![0.1, 0.5, -0.4]);
        let lambda = 0.7;
        // termwise: entries of K_i from the kernel function, quadratic form for the penalty
        let mut fit = 0.0;
        for j in 0..3 {
            for m in 0..4 {
                let mut pred = b[j] * ds.x()[(m, j)];
                for i in 0..3 {
                    if i == j {
                        continue;
                    }
                    for l in 0..4 {
                        pred += spec.value(ds.y()[(m, i)], ds.y()[(l, i)]) * coeffs.blocks.block(i, j)[l];
                    }
                }
                fit += 0.5 * (ds.y()[(m, j)] - pred).powi(2);
            }
        }
        let mut reg = 0.0;
        for j in 0..3 {
            for i in 0..3 {
                if i == j {
                    continue;
                }
                let a = coeffs.blocks.block(i, j);
                let mut q = 0.0;
                for k in 0..4 {
                    for l in 0..4 {
                        q += a[k] * spec.value(ds.y()[(k, i)], ds.y()[(l, i)]) * a[l];
                    }
                }
                reg += q.max(0.0).sqrt();
            }
        }
        let v = objective_value(&ds, &ks, &coeffs, &b, lambda);
        assert!((v - (fit + lambda * reg)).abs() < 1e-9 * v.abs().max(1.0));
    }

    #[test]
    fn objective_nonnegative_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let ds = random_dataset(&mut rng, 5, 4);
        let ks = build_kernel_set(
            &KernelSpec::Polynomial { order: 2 },
            ds.y(),
            Ridge::Absolute(0.0),
            Execution::Sequential,
        )
        .unwrap();
        let coeffs = DualCoefficients {
            blocks: random_grid(&mut rng, 4, 5),
        };
        let b = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let v = objective_value(&ds, &ks, &coeffs, &b, 0.4);
        assert!(v >= 0.0);

        // relabel nodes by a cyclic shift
        let perm = [1usize, 2, 3, 0];
        let y = DMatrix::from_fn(5, 4, |m, j| ds.y()[(m, perm[j])]);
        let x = DMatrix::from_fn(5, 4, |m, j| ds.x()[(m, perm[j])]);
        let ds2 = Dataset::new(y, x).unwrap();
        let ks2 = build_kernel_set(
            &KernelSpec::Polynomial { order: 2 },
            ds2.y(),
            Ridge::Absolute(0.0),
            Execution::Sequential,
        )
        .unwrap();
        let mut g2 = BlockGrid::zeros(4, 5);
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    g2.block_mut(i, j).copy_from(&coeffs.blocks.block(perm[i], perm[j]));
                }
            }
        }
        let b2 = DVector::from_fn(4, |j, _| b[perm[j]]);
        let v2 = objective_value(&ds2, &ks2, &DualCoefficients { blocks: g2 }, &b2, 0.4);
        assert!((v - v2).abs() < 1e-10 * v);
    }

    #[test]
    fn block_grid_keeps_diagonal_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_grid(&mut rng, 3, 2);
        assert!(g.diagonal_is_zero());
        let norms = g.block_norms();
        assert_eq!(norms[(1, 1)], 0.0);
        assert!((norms[(0, 1)] - g.block(0, 1).norm()).abs() < 1e-15);
    }
}
