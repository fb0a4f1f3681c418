//! ADMM solver for the kernelized estimator.
//!
//! Splits `gamma_ij = K_i^{1/2} alpha_ij`, then alternates a closed-form
//! `alpha` update per column (through the matrix inversion lemma, so only
//! `M x M` systems are factorized), the scalar `b_jj` update, group shrinkage
//! on `gamma`, and dual ascent on `xi`. Every step is local to one column, so
//! columns run in parallel within an iteration.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};

use crate::error::{Error, Result};
use crate::kernel::{numerical_zero, KernelSet};
use crate::model::{
    edges_from_scores, objective_value, AdmmAux, BlockGrid, Coefficients, Dataset, DualCoefficients, EstimateMeta,
    ScoreRule, SolverConfig, SolverKind, TopologyEstimate,
};
use crate::par;

/// Block soft-threshold `z / ||z|| * max(||z|| - t, 0)`, with `P_t(0) = 0`.
pub fn group_shrinkage(z: &DVector<f64>, t: f64) -> DVector<f64> {
    let norm = z.norm();
    if norm <= t || norm == 0.0 {
        DVector::zeros(z.len())
    } else {
        z * ((norm - t) / norm)
    }
}

#[derive(Debug, Clone)]
pub struct AdmmState {
    pub coeffs: BlockGrid,
    pub b_diag: DVector<f64>,
    pub gamma: BlockGrid,
    pub duals: BlockGrid,
    pub iter: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

impl AdmmState {
    pub fn zeros(n: usize, m: usize) -> Self {
        AdmmState {
            coeffs: BlockGrid::zeros(n, m),
            b_diag: DVector::zeros(n),
            gamma: BlockGrid::zeros(n, m),
            duals: BlockGrid::zeros(n, m),
            iter: 0,
            primal_residual: 0.0,
            dual_residual: 0.0,
        }
    }
}

enum AlphaSystem {
    /// Cholesky factor of `S_j = rho I + sum_{i != j} K_i` per column.
    Lemma(Vec<Cholesky<f64, Dyn>>),
    Dense(Vec<LU<f64, Dyn, Dyn>>),
}

/// Per-column factorizations reused across iterations (they depend only on
/// the kernels and `rho`).
///
/// With `C_i = D_i = K_i` the inversion lemma collapses: `D_i^{-1} C_i^T = I`,
/// so block `i` of `(K~^T K~ + rho D)^{-1} q` is
/// `(K_i^{-1} q_i - S_j^{-1} sum_k q_k) / rho` and `S_j` is the only matrix
/// factorized.
pub struct AdmmWorkspace {
    rho: f64,
    n: usize,
    m: usize,
    system: AlphaSystem,
}

impl AdmmWorkspace {
    pub fn new(kernels: &KernelSet, rho: f64, exec: par::Execution) -> Result<Self> {
        let (n, m) = (kernels.nodes(), kernels.samples());
        for &(min_eig, max_eig) in &kernels.eig_bounds {
            if min_eig <= numerical_zero(m, max_eig) {
                return Err(Error::NumericalSingularity { dim: m });
            }
        }
        let total = kernels.per_node.iter().fold(DMatrix::zeros(m, m), |acc, k| acc + k);
        let factors = par::map_range(exec, n, |j| {
            let mut s = &total - &kernels.per_node[j];
            for d in 0..m {
                s[(d, d)] += rho;
            }
            Cholesky::new(s).ok_or(Error::NumericalSingularity { dim: m })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(AdmmWorkspace {
            rho,
            n,
            m,
            system: AlphaSystem::Lemma(factors),
        })
    }

    /// Direct factorization of the full `(N-1)M` systems, for cross-checks.
    pub fn dense(kernels: &KernelSet, rho: f64) -> Result<Self> {
        let n = kernels.nodes();
        let m = kernels.samples();
        let mut lus = Vec::with_capacity(n);
        for j in 0..n {
            let others: Vec<usize> = (0..n).filter(|&i| i != j).collect();
            let dim = others.len() * m;
            let mut kt = DMatrix::zeros(m, dim);
            let mut d = DMatrix::zeros(dim, dim);
            for (slot, &i) in others.iter().enumerate() {
                kt.view_mut((0, slot * m), (m, m)).copy_from(&kernels.per_node[i]);
                d.view_mut((slot * m, slot * m), (m, m)).copy_from(&kernels.per_node[i]);
            }
            let a = kt.transpose() * &kt + d * rho;
            let lu = a.lu();
            if !lu.is_invertible() {
                return Err(Error::NumericalSingularity { dim });
            }
            lus.push(lu);
        }
        Ok(AdmmWorkspace {
            rho,
            n,
            m,
            system: AlphaSystem::Dense(lus),
        })
    }

    /// Size of the largest matrix factorized by this workspace.
    pub fn largest_factorized_dim(&self) -> usize {
        match &self.system {
            AlphaSystem::Lemma(f) => f.iter().map(|c| c.l_dirty().nrows()).max().unwrap_or(0),
            AlphaSystem::Dense(_) => (self.n - 1) * self.m,
        }
    }
}

fn remove_block(v: &DVector<f64>, j: usize, m: usize) -> DVector<f64> {
    let n = v.len() / m;
    DVector::from_iterator(
        (n - 1) * m,
        (0..n)
            .filter(|&i| i != j)
            .flat_map(|i| v.rows(i * m, m).iter().copied().collect::<Vec<_>>()),
    )
}

fn pad_block(v: &DVector<f64>, j: usize, m: usize) -> DVector<f64> {
    let n = v.len() / m + 1;
    let mut out = DVector::zeros(n * m);
    let mut slot = 0;
    for i in 0..n {
        if i != j {
            out.rows_mut(i * m, m).copy_from(&v.rows(slot * m, m));
            slot += 1;
        }
    }
    out
}

/// Right-hand side `q_j` with the node-`j` block removed.
fn alpha_rhs(
    gamma_j: &DVector<f64>,
    xi_j: &DVector<f64>,
    b_j: f64,
    dataset: &Dataset,
    kernels: &KernelSet,
    rho: f64,
    j: usize,
) -> DVector<f64> {
    let m = dataset.samples();
    let target = dataset.y().column(j) - dataset.x().column(j) * b_j;
    let mut q = DVector::zeros(dataset.nodes() * m);
    for i in 0..dataset.nodes() {
        if i == j {
            continue;
        }
        let sqrt = &kernels.sqrt_per_node[i];
        let blk = sqrt * (gamma_j.rows(i * m, m) * rho - xi_j.rows(i * m, m)) + &kernels.per_node[i] * &target;
        q.rows_mut(i * m, m).copy_from(&blk);
    }
    remove_block(&q, j, m)
}

/// Closed-form minimizer over column `j` of the coefficients; returned
/// zero-padded to length `N M`.
pub fn admm_update_alpha(
    state: &AdmmState,
    dataset: &Dataset,
    kernels: &KernelSet,
    workspace: &AdmmWorkspace,
    j: usize,
) -> DVector<f64> {
    let m = dataset.samples();
    let rho = workspace.rho;
    match &workspace.system {
        AlphaSystem::Dense(lus) => {
            let q = alpha_rhs(
                state.gamma.column(j),
                state.duals.column(j),
                state.b_diag[j],
                dataset,
                kernels,
                rho,
                j,
            );
            pad_block(&lus[j].solve(&q).expect("factorization checked invertible"), j, m)
        }
        AlphaSystem::Lemma(factors) => {
            // alpha_i = (K_i^{-1/2} u_i - S^{-1}(sum_k K_k^{1/2} u_k - rho t)) / rho,
            // u_i = rho gamma_ij - xi_ij, t = y_j - b_jj x_j
            let t = dataset.y().column(j) - dataset.x().column(j) * state.b_diag[j];
            let mut acc = -(&t * rho);
            let mut out = DVector::zeros(dataset.nodes() * m);
            for i in 0..dataset.nodes() {
                if i == j {
                    continue;
                }
                let u = state.gamma.block(i, j) * rho - state.duals.block(i, j);
                acc += &kernels.sqrt_per_node[i] * &u;
                out.rows_mut(i * m, m).copy_from(&(&kernels.pinv_sqrt_per_node[i] * &u));
            }
            let shared = factors[j].solve(&acc);
            for i in 0..dataset.nodes() {
                if i != j {
                    let mut blk = out.rows_mut(i * m, m);
                    blk -= &shared;
                    blk /= rho;
                }
            }
            out
        }
    }
}

/// `b_jj = x_j^T (y_j - K~ alpha_j) / x_j^T x_j` for a padded column `alpha_j`.
pub fn admm_update_b(alpha_j: &DVector<f64>, dataset: &Dataset, kernels: &KernelSet, j: usize) -> f64 {
    let m = dataset.samples();
    let mut r = dataset.y().column(j).into_owned();
    for i in 0..dataset.nodes() {
        if i != j {
            r -= &kernels.per_node[i] * alpha_j.rows(i * m, m);
        }
    }
    let x = dataset.x().column(j);
    x.dot(&r) / x.norm_squared()
}

/// `gamma_ij = P_{lambda/rho}(K_i^{1/2} alpha_ij + xi_ij / rho)`.
pub fn admm_update_gamma(
    sqrt_k: &DMatrix<f64>,
    alpha_ij: &DVector<f64>,
    xi_ij: &DVector<f64>,
    lambda: f64,
    rho: f64,
) -> DVector<f64> {
    group_shrinkage(&(sqrt_k * alpha_ij + xi_ij / rho), lambda / rho)
}

struct ColumnUpdate {
    alpha: DVector<f64>,
    b: f64,
    gamma: DVector<f64>,
    xi: DVector<f64>,
    primal_sq: f64,
    dual_sq: f64,
    d_alpha_sq: f64,
    gamma_sq: f64,
    d_xi_sq: f64,
}

fn update_column(
    state: &AdmmState,
    dataset: &Dataset,
    kernels: &KernelSet,
    workspace: &AdmmWorkspace,
    lambda: f64,
    j: usize,
) -> ColumnUpdate {
    let m = dataset.samples();
    let rho = workspace.rho;
    let alpha = admm_update_alpha(state, dataset, kernels, workspace, j);
    let n = dataset.nodes();
    // K_i^{1/2} alpha_ij is reused for the b fit (K_i alpha = K^{1/2} K^{1/2} alpha)
    let s_alpha: Vec<Option<DVector<f64>>> = (0..n)
        .map(|i| (i != j).then(|| &kernels.sqrt_per_node[i] * alpha.rows(i * m, m)))
        .collect();
    let mut r = dataset.y().column(j).into_owned();
    for (i, sa) in s_alpha.iter().enumerate() {
        if let Some(sa) = sa {
            r -= &kernels.sqrt_per_node[i] * sa;
        }
    }
    let x = dataset.x().column(j);
    let b = x.dot(&r) / x.norm_squared();
    let mut gamma = DVector::zeros(alpha.len());
    let mut xi = state.duals.column(j).clone();
    let (mut primal_sq, mut dual_sq, mut d_alpha_sq, mut gamma_sq, mut d_xi_sq) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, sa) in s_alpha.into_iter().enumerate() {
        let Some(s_alpha) = sa else { continue };
        let sqrt = &kernels.sqrt_per_node[i];
        let old_xi = state.duals.block(i, j);
        let g = group_shrinkage(&(&s_alpha + old_xi / rho), lambda / rho);
        let gap = &s_alpha - &g;
        let new_xi = old_xi + &gap * rho;
        let dg = &g - state.gamma.block(i, j);
        primal_sq += gap.norm_squared();
        dual_sq += (sqrt * dg).norm_squared() * rho * rho;
        d_alpha_sq += s_alpha.norm_squared();
        gamma_sq += g.norm_squared();
        d_xi_sq += (sqrt * &new_xi).norm_squared();
        gamma.rows_mut(i * m, m).copy_from(&g);
        xi.rows_mut(i * m, m).copy_from(&new_xi);
    }
    ColumnUpdate {
        alpha,
        b,
        gamma,
        xi,
        primal_sq,
        dual_sq,
        d_alpha_sq,
        gamma_sq,
        d_xi_sq,
    }
}

/// One full ADMM iteration. Returns whether the scaled residual test passed.
pub fn admm_iteration(
    state: &mut AdmmState,
    dataset: &Dataset,
    kernels: &KernelSet,
    workspace: &AdmmWorkspace,
    config: &SolverConfig,
) -> Result<bool> {
    let updates = par::map_range(config.execution, dataset.nodes(), |j| {
        update_column(state, dataset, kernels, workspace, config.lambda, j)
    });
    let (mut p, mut s, mut da, mut g, mut dx) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (j, u) in updates.into_iter().enumerate() {
        p += u.primal_sq;
        s += u.dual_sq;
        da += u.d_alpha_sq;
        g += u.gamma_sq;
        dx += u.d_xi_sq;
        state.coeffs.set_column(j, u.alpha);
        state.b_diag[j] = u.b;
        state.gamma.set_column(j, u.gamma);
        state.duals.set_column(j, u.xi);
    }
    state.iter += 1;
    state.primal_residual = p.sqrt();
    state.dual_residual = s.sqrt();
    if !state.primal_residual.is_finite()
        || !state.dual_residual.is_finite()
        || !state.b_diag.iter().all(|v| v.is_finite())
    {
        return Err(Error::Diverged {
            solver: "admm",
            iteration: state.iter,
        });
    }
    let eps_primal = config.tol * (1.0 + da.sqrt().max(g.sqrt()));
    let eps_dual = config.tol * (1.0 + dx.sqrt());
    Ok(state.primal_residual <= eps_primal && state.dual_residual <= eps_dual)
}

pub fn run_admm(dataset: &Dataset, kernels: &KernelSet, config: &SolverConfig) -> Result<TopologyEstimate> {
    run_admm_warm(dataset, kernels, config, None)
}

pub fn run_admm_warm(
    dataset: &Dataset,
    kernels: &KernelSet,
    config: &SolverConfig,
    warm: Option<&TopologyEstimate>,
) -> Result<TopologyEstimate> {
    config.validate()?;
    let workspace = AdmmWorkspace::new(kernels, config.rho, config.execution)?;
    run_admm_with(dataset, kernels, config, &workspace, warm)
}

/// ADMM with a caller-provided workspace (lets the dense path be swapped in).
pub fn run_admm_with(
    dataset: &Dataset,
    kernels: &KernelSet,
    config: &SolverConfig,
    workspace: &AdmmWorkspace,
    warm: Option<&TopologyEstimate>,
) -> Result<TopologyEstimate> {
    config.validate()?;
    let (n, m) = (dataset.nodes(), dataset.samples());
    if kernels.nodes() != n || kernels.samples() != m || workspace.n != n || workspace.m != m {
        return Err(Error::DimensionMismatch("kernel set does not match dataset".into()));
    }
    let mut state = AdmmState::zeros(n, m);
    if let Some(w) = warm.filter(|w| w.meta.solver == SolverKind::Admm && w.native.block_len() == m) {
        state.coeffs = w.native.clone();
        state.b_diag = w.b_diag.clone();
        if let Some(aux) = &w.admm_aux {
            state.gamma = aux.gamma.clone();
            state.duals = aux.duals.clone();
        }
    }
    let mut trace = Vec::new();
    let mut converged = false;
    while state.iter < config.max_iters {
        converged = admm_iteration(&mut state, dataset, kernels, workspace, config)?;
        if config.record_trace {
            let c = DualCoefficients {
                blocks: state.coeffs.clone(),
            };
            trace.push(objective_value(dataset, kernels, &c, &state.b_diag, config.lambda));
        }
        if converged {
            break;
        }
    }
    let coeffs = DualCoefficients { blocks: state.coeffs };
    let objective = objective_value(dataset, kernels, &coeffs, &state.b_diag, config.lambda);
    let scores = match config.score_rule {
        ScoreRule::Native => coeffs.blocks.block_norms(),
        ScoreRule::KernelWeighted => coeffs.blocks.map_blocks(&kernels.sqrt_per_node).block_norms(),
    };
    Ok(TopologyEstimate {
        adjacency: edges_from_scores(&scores, config.tau),
        scores,
        b_diag: state.b_diag,
        native: coeffs.blocks.clone(),
        coefficients: Coefficients::Dual(coeffs),
        admm_aux: Some(AdmmAux {
            gamma: state.gamma,
            duals: state.duals,
        }),
        meta: EstimateMeta {
            solver: SolverKind::Admm,
            iterations: state.iter,
            objective,
            converged,
            tau: config.tau,
            lambda: config.lambda,
            score_rule: config.score_rule,
            objective_trace: trace,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{build_kernel_set, KernelSpec, Ridge};
    use crate::par::Execution;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(seed: u64, m: usize, n: usize, spec: KernelSpec) -> (Dataset, KernelSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let x = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let ds = Dataset::new(y, x).unwrap();
        let ks = build_kernel_set(&spec, ds.y(), Ridge::Relative(1e-3), Execution::Sequential).unwrap();
        (ds, ks)
    }

    fn random_state(rng: &mut ChaCha8Rng, n: usize, m: usize) -> AdmmState {
        let grid = |rng: &mut ChaCha8Rng| {
            let cols = (0..n)
                .map(|_| DVector::from_fn(n * m, |_, _| rng.random_range(-1.0..1.0)))
                .collect();
            BlockGrid::from_columns(n, m, cols).unwrap()
        };
        AdmmState {
            coeffs: grid(rng),
            b_diag: DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
            gamma: grid(rng),
            duals: grid(rng),
            iter: 0,
            primal_residual: 0.0,
            dual_residual: 0.0,
        }
    }

    #[test]
    fn shrinkage_examples() {
        assert_eq!(group_shrinkage(&DVector::zeros(3), 1.0), DVector::zeros(3));
        let z = DVector::from_vec(vec![3.0, 4.0]);
        assert_eq!(group_shrinkage(&z, 5.0), DVector::zeros(2));
        let s = group_shrinkage(&z, 1.0);
        assert!((s[0] - 2.4).abs() < 1e-15 && (s[1] - 3.2).abs() < 1e-15);
        assert_eq!(group_shrinkage(&z, 0.0), z);
    }

    #[test]
    fn alpha_zero_for_zero_rhs() {
        let (ds, ks) = instance(1, 4, 3, KernelSpec::Gaussian { bandwidth: 1.0 });
        let ds0 = Dataset::new(DMatrix::zeros(4, 3), ds.x().clone()).unwrap();
        let ws = AdmmWorkspace::new(&ks, 1.0, Execution::Sequential).unwrap();
        let st = AdmmState::zeros(3, 4);
        for j in 0..3 {
            assert_eq!(admm_update_alpha(&st, &ds0, &ks, &ws, j).norm(), 0.0);
        }
    }

    #[test]
    fn alpha_matches_dense_normal_equations() {
        let (ds, ks) = instance(2, 2, 3, KernelSpec::Gaussian { bandwidth: 0.7 });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let st = random_state(&mut rng, 3, 2);
        let rho = 1.3;
        let ws = AdmmWorkspace::new(&ks, rho, Execution::Sequential).unwrap();
        for j in 0..3 {
            let fast = admm_update_alpha(&st, &ds, &ks, &ws, j);
            // dense oracle built from the quadratic's definition
            let others: Vec<usize> = (0..3).filter(|&i| i != j).collect();
            let mut kt = DMatrix::zeros(2, 4);
            let mut d = DMatrix::zeros(4, 4);
            let mut dh = DMatrix::zeros(4, 4);
            let mut gam = DVector::zeros(4);
            let mut xi = DVector::zeros(4);
            for (s, &i) in others.iter().enumerate() {
                kt.view_mut((0, 2 * s), (2, 2)).copy_from(&ks.per_node[i]);
                d.view_mut((2 * s, 2 * s), (2, 2)).copy_from(&ks.per_node[i]);
                dh.view_mut((2 * s, 2 * s), (2, 2)).copy_from(&ks.sqrt_per_node[i]);
                gam.rows_mut(2 * s, 2).copy_from(&st.gamma.block(i, j));
                xi.rows_mut(2 * s, 2).copy_from(&st.duals.block(i, j));
            }
            let q = &dh * &gam * rho + kt.transpose() * ds.y().column(j)
                - &dh * &xi
                - kt.transpose() * ds.x().column(j) * st.b_diag[j];
            let dense = (kt.transpose() * &kt + d * rho).lu().solve(&q).unwrap();
            let got = remove_block(&fast, j, 2);
            assert!((&got - &dense).norm() <= 1e-8 * dense.norm());
        }
    }

    #[test]
    fn large_rho_shrinks_alpha() {
        let (ds, ks) = instance(4, 3, 3, KernelSpec::Gaussian { bandwidth: 1.0 });
        let st = AdmmState::zeros(3, 3);
        let small = AdmmWorkspace::new(&ks, 1.0, Execution::Sequential).unwrap();
        let large = AdmmWorkspace::new(&ks, 1e6, Execution::Sequential).unwrap();
        let a1 = admm_update_alpha(&st, &ds, &ks, &small, 0).norm();
        let a2 = admm_update_alpha(&st, &ds, &ks, &large, 0).norm();
        assert!(a2 < 1e-4 * a1.max(1.0), "{a2} vs {a1}");
    }

    #[test]
    fn b_update_examples() {
        let (ds, ks) = instance(5, 4, 3, KernelSpec::Polynomial { order: 2 });
        let y = ds.x() * 2.0;
        let ds2 = Dataset::new(y, ds.x().clone()).unwrap();
        let zero = DVector::zeros(12);
        assert!((admm_update_b(&zero, &ds2, &ks, 1) - 2.0).abs() < 1e-12);

        // y_j = K~ alpha_j exactly gives b = 0
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut alpha = DVector::from_fn(12, |_, _| rng.random_range(-1.0..1.0));
        alpha.rows_mut(4, 4).fill(0.0);
        let mut yj = DVector::zeros(4);
        for i in [0, 2] {
            yj += &ks.per_node[i] * alpha.rows(i * 4, 4);
        }
        let mut y = ds.y().clone();
        y.column_mut(1).copy_from(&yj);
        let ds3 = Dataset::new(y, ds.x().clone()).unwrap();
        assert!(admm_update_b(&alpha, &ds3, &ks, 1).abs() < 1e-12);
    }

    #[test]
    fn b_update_matches_golden_section() {
        let (ds, ks) = instance(7, 5, 3, KernelSpec::Polynomial { order: 2 });
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut alpha = DVector::from_fn(15, |_, _| rng.random_range(-0.3..0.3));
        alpha.rows_mut(0, 5).fill(0.0);
        let f = |b: f64| {
            let mut r = ds.y().column(0) - ds.x().column(0) * b;
            for i in 1..3 {
                r -= &ks.per_node[i] * alpha.rows(i * 5, 5);
            }
            r.norm_squared()
        };
        let (mut lo, mut hi) = (-100.0f64, 100.0f64);
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        while hi - lo > 1e-9 {
            let a = hi - phi * (hi - lo);
            let b = lo + phi * (hi - lo);
            if f(a) < f(b) {
                hi = b
            } else {
                lo = a
            }
        }
        let b = admm_update_b(&alpha, &ds, &ks, 0);
        assert!((b - 0.5 * (lo + hi)).abs() < 1e-6);
    }

    #[test]
    fn gamma_update_cases() {
        let (_, ks) = instance(9, 4, 2, KernelSpec::Gaussian { bandwidth: 1.0 });
        let zero = DVector::zeros(4);
        assert_eq!(admm_update_gamma(&ks.sqrt_per_node[0], &zero, &zero, 0.5, 1.0), zero);
        let a = DVector::from_vec(vec![0.3, -0.1, 0.2, 0.4]);
        let xi = DVector::from_vec(vec![0.1, 0.2, -0.2, 0.0]);
        let g = admm_update_gamma(&ks.sqrt_per_node[0], &a, &xi, 0.0, 2.0);
        assert!((g - (&ks.sqrt_per_node[0] * &a + &xi / 2.0)).norm() < 1e-15);
    }

    #[test]
    fn gamma_satisfies_block_optimality() {
        // per-block problem: lambda ||g|| - xi^T g + rho/2 ||s - g||^2
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..200 {
            let s = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            let xi = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            let (lambda, rho) = (rng.random_range(0.0..2.0), rng.random_range(0.1..3.0));
            let g = group_shrinkage(&(&s + &xi / rho), lambda / rho);
            let smooth_grad = -&xi - (&s - &g) * rho;
            if g.norm() > 0.0 {
                let r = &smooth_grad + &g * (lambda / g.norm());
                assert!(r.norm() < 1e-8);
            } else {
                assert!(smooth_grad.norm() <= lambda + 1e-8);
            }
        }
    }

    #[test]
    fn zero_data_zero_estimate() {
        let (ds, _) = instance(11, 5, 3, KernelSpec::Polynomial { order: 2 });
        let ds0 = Dataset::new(DMatrix::zeros(5, 3), ds.x().clone()).unwrap();
        let ks0 = build_kernel_set(
            &KernelSpec::Gaussian { bandwidth: 1.0 },
            ds0.y(),
            Ridge::default(),
            Execution::Sequential,
        )
        .unwrap();
        let est = run_admm(&ds0, &ks0, &SolverConfig::default()).unwrap();
        assert_eq!(est.edge_count(), 0);
        assert_eq!(est.native.frobenius_norm(), 0.0);
        assert_eq!(est.b_diag, DVector::zeros(3));
        assert!(est.meta.converged);
    }

    #[test]
    fn woodbury_and_dense_iterates_agree() {
        let (ds, ks) = instance(12, 4, 4, KernelSpec::Gaussian { bandwidth: 0.5 });
        let cfg = SolverConfig {
            lambda: 0.05,
            max_iters: 25,
            tol: 1e-300,
            execution: Execution::Sequential,
            ..Default::default()
        };
        let fast_ws = AdmmWorkspace::new(&ks, cfg.rho, Execution::Sequential).unwrap();
        let dense_ws = AdmmWorkspace::dense(&ks, cfg.rho).unwrap();
        assert_eq!(fast_ws.largest_factorized_dim(), 4);
        let singular = build_kernel_set(
            &KernelSpec::Polynomial { order: 1 },
            ds.y(),
            Ridge::Absolute(0.0),
            Execution::Sequential,
        )
        .unwrap();
        assert!(matches!(
            AdmmWorkspace::new(&singular, 1.0, Execution::Sequential),
            Err(Error::NumericalSingularity { dim: 4 })
        ));
        assert_eq!(dense_ws.largest_factorized_dim(), 12);
        let mut a = AdmmState::zeros(4, 4);
        let mut b = AdmmState::zeros(4, 4);
        for _ in 0..25 {
            admm_iteration(&mut a, &ds, &ks, &fast_ws, &cfg).unwrap();
            admm_iteration(&mut b, &ds, &ks, &dense_ws, &cfg).unwrap();
            for j in 0..4 {
                let (ca, cb) = (a.coeffs.column(j), b.coeffs.column(j));
                assert!((ca - cb).norm() <= 1e-8 * cb.norm().max(1.0));
            }
        }
    }

    #[test]
    fn diagonal_blocks_stay_zero() {
        let (ds, ks) = instance(13, 6, 4, KernelSpec::Polynomial { order: 2 });
        let cfg = SolverConfig {
            lambda: 0.1,
            max_iters: 30,
            ..Default::default()
        };
        let ws = AdmmWorkspace::new(&ks, cfg.rho, Execution::Sequential).unwrap();
        let mut st = AdmmState::zeros(4, 6);
        for _ in 0..30 {
            admm_iteration(&mut st, &ds, &ks, &ws, &cfg).unwrap();
            assert!(st.coeffs.diagonal_is_zero() && st.gamma.diagonal_is_zero() && st.duals.diagonal_is_zero());
            assert!(st.primal_residual >= 0.0 && st.dual_residual >= 0.0);
        }
    }

    #[test]
    fn unregularized_fixed_point_is_stationary() {
        let (ds, ks) = instance(14, 6, 3, KernelSpec::Gaussian { bandwidth: 0.8 });
        let cfg = SolverConfig {
            lambda: 0.0,
            max_iters: 20000,
            tol: 1e-10,
            ..Default::default()
        };
        let est = run_admm(&ds, &ks, &cfg).unwrap();
        assert!(est.meta.converged);
        let Coefficients::Dual(c) = &est.coefficients else {
            unreachable!()
        };
        for j in 0..3 {
            let r = crate::model::kernel_column_residual(&ds, &ks, &c.blocks, est.b_diag[j], j);
            for i in 0..3 {
                if i != j {
                    assert!((&ks.per_node[i] * &r).norm() < 1e-6);
                }
            }
            assert!(ds.x().column(j).dot(&r).abs() < 1e-6);
        }
    }
}
