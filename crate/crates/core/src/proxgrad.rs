//! Proximal-gradient (PG) and accelerated proximal-gradient (APG) solvers.
//!
//! The estimator decouples over columns: for node `j` the smooth part is
//! `f = 1/2 ||y_j - sum_{i != j} F_i theta_ij - b_jj x_j||^2` and the penalty is
//! `lambda sum_{i != j} ||theta_ij||`, where the design blocks `F_i` are the
//! Gram square roots `K_i^{1/2}` (kernel solvers, `theta = zeta`) or the
//! polynomial feature matrices (see [`crate::polysem`]). The engine here is
//! shared by both.

use nalgebra::{DMatrix, DVector};

use crate::admm::group_shrinkage;
use crate::error::{Error, Result};
use crate::kernel::KernelSet;
use crate::model::{
    edges_from_scores, objective_value, BlockGrid, Coefficients, Dataset, DualCoefficients, EstimateMeta, ScoreRule,
    SolverConfig, SolverKind, TopologyEstimate,
};
use crate::par;

/// Safety factor applied to the power-iteration estimate of `lambda_max`.
pub const LIPSCHITZ_SAFETY: f64 = 1.01;

const EXACT_EIGEN_DIM: usize = 256;

/// Largest eigenvalue of a symmetric PSD matrix. Small matrices are solved
/// exactly; larger ones use power iteration to `1e-6` relative change and fall
/// back to the trace (an upper bound) if that does not settle.
pub fn max_eigenvalue_psd(g: &DMatrix<f64>) -> f64 {
    let dim = g.nrows();
    if dim == 0 {
        return 0.0;
    }
    if dim <= EXACT_EIGEN_DIM {
        return nalgebra::SymmetricEigen::new(g.clone()).eigenvalues.max().max(0.0);
    }
    let trace = g.trace().max(0.0);
    if trace == 0.0 {
        return 0.0;
    }
    let mut v = DVector::from_fn(dim, |k, _| 1.0 + 0.5 * ((k as f64) * 0.618_034).sin());
    v.normalize_mut();
    let mut est = 0.0;
    let cap = (10 * dim).max(1000);
    for it in 0..cap {
        let w = g * &v;
        let next = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return trace;
        }
        v = w / norm;
        if it > 2 && (next - est).abs() <= 1e-6 * next.abs() {
            return next;
        }
        est = next;
    }
    trace
}

/// `lambda_max(P^T P)` times [`LIPSCHITZ_SAFETY`], using whichever of
/// `P P^T` / `P^T P` is smaller.
pub fn lipschitz_of_matrix(p: &DMatrix<f64>) -> f64 {
    let g = if p.nrows() <= p.ncols() {
        p * p.transpose()
    } else {
        p.transpose() * p
    };
    LIPSCHITZ_SAFETY * max_eigenvalue_psd(&g)
}

/// Lipschitz constant of the column-`j` gradient for `P_j = [F_{-j}  x_j]`.
pub fn column_lipschitz(blocks: &[DMatrix<f64>], x_j: &DVector<f64>, j: usize) -> f64 {
    let n = blocks.len();
    let m = x_j.len();
    let d = blocks[0].ncols();
    let cols = (n - 1) * d + 1;
    let g = if m <= cols {
        let mut g = x_j * x_j.transpose();
        for (i, f) in blocks.iter().enumerate() {
            if i != j {
                g += f * f.transpose();
            }
        }
        g
    } else {
        let mut p = DMatrix::zeros(m, cols);
        let mut c = 0;
        for (i, f) in blocks.iter().enumerate() {
            if i != j {
                p.view_mut((0, c), (m, d)).copy_from(f);
                c += d;
            }
        }
        p.column_mut(cols - 1).copy_from(x_j);
        p.transpose() * p
    };
    let l = LIPSCHITZ_SAFETY * max_eigenvalue_psd(&g);
    if l > 0.0 {
        l
    } else {
        // all-zero design: any positive step is exact
        1.0
    }
}

/// Kernel solvers: constant for `P_j = [K-breve_j  x_j]`.
pub fn lipschitz_constant(kernels: &KernelSet, dataset: &Dataset, j: usize) -> f64 {
    column_lipschitz(&kernels.sqrt_per_node, &dataset.x().column(j).into_owned(), j)
}

/// `sum_{i != j} F_i theta_ij + b x_j - y_j` (prediction minus target).
pub(crate) fn column_residual(
    blocks: &[DMatrix<f64>],
    theta: &DVector<f64>,
    b: f64,
    dataset: &Dataset,
    j: usize,
) -> DVector<f64> {
    let d = blocks[0].ncols();
    let mut r = dataset.x().column(j) * b - dataset.y().column(j);
    for (i, f) in blocks.iter().enumerate() {
        if i != j {
            r += f * theta.rows(i * d, d);
        }
    }
    r
}

/// Gradients of the smooth part given its residual; block `j` stays zero.
pub(crate) fn column_gradients_from_residual(
    blocks: &[DMatrix<f64>],
    r: &DVector<f64>,
    dataset: &Dataset,
    j: usize,
) -> (DVector<f64>, f64) {
    let d = blocks[0].ncols();
    let mut g = DVector::zeros(blocks.len() * d);
    for (i, f) in blocks.iter().enumerate() {
        if i != j {
            g.rows_mut(i * d, d).copy_from(&f.tr_mul(r));
        }
    }
    (g, r.dot(&dataset.x().column(j)))
}

fn column_penalty(theta: &DVector<f64>, d: usize, j: usize) -> f64 {
    (0..theta.len() / d)
        .filter(|&i| i != j)
        .map(|i| theta.rows(i * d, d).norm())
        .sum()
}

/// One proximal step from the point `(point, b_point)`.
pub(crate) fn prox_step(
    point: &DVector<f64>,
    b_point: f64,
    grad: &DVector<f64>,
    grad_b: f64,
    lipschitz: f64,
    lambda: f64,
    d: usize,
    j: usize,
) -> (DVector<f64>, f64) {
    let step = 1.0 / lipschitz;
    let z = point - grad * step;
    let mut out = DVector::zeros(point.len());
    for i in 0..point.len() / d {
        if i != j {
            let blk = group_shrinkage(&z.rows(i * d, d).into_owned(), lambda * step);
            out.rows_mut(i * d, d).copy_from(&blk);
        }
    }
    (out, b_point - grad_b * step)
}

/// FISTA momentum sequence with `beta_{-1} = beta_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Momentum {
    prev: f64,
    current: f64,
    k: usize,
}

impl Default for Momentum {
    fn default() -> Self {
        Momentum {
            prev: 1.0,
            current: 1.0,
            k: 0,
        }
    }
}

impl Momentum {
    pub fn next_beta(beta: f64) -> f64 {
        (1.0 + (4.0 * beta * beta + 1.0).sqrt()) / 2.0
    }

    /// `(beta_{k-1} - 1) / beta_k` for the current `k`.
    pub fn weight(&self) -> f64 {
        (self.prev - 1.0) / self.current
    }

    pub fn beta(&self) -> f64 {
        self.current
    }

    pub fn index(&self) -> usize {
        self.k
    }

    pub fn advance(&mut self) {
        let next = Self::next_beta(self.current);
        self.prev = self.current;
        self.current = next;
        self.k += 1;
    }
}

pub(crate) struct EngineOutcome {
    pub theta: BlockGrid,
    pub b_diag: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<f64>,
}

/// Outcome of solving one column to its own stopping point.
struct ColumnRun {
    theta: DVector<f64>,
    b: f64,
    iterations: usize,
    converged: bool,
    /// Objective after each iteration, starting with the initial point.
    trace: Vec<f64>,
}

/// PG or APG on the column-`j` problem, run until its own stopping test
/// passes. PG stops on relative objective change; APG additionally requires
/// the running minimum to have settled and returns the best iterate seen.
#[allow(clippy::too_many_arguments)]
fn run_column(
    blocks: &[DMatrix<f64>],
    dataset: &Dataset,
    config: &SolverConfig,
    accelerated: bool,
    lipschitz: f64,
    start: (DVector<f64>, f64),
    j: usize,
) -> ColumnRun {
    let d = blocks[0].ncols();
    let lambda = config.lambda;
    let (mut theta, mut b) = start;
    let mut resid = column_residual(blocks, &theta, b, dataset, j);
    let mut objective = 0.5 * resid.norm_squared() + lambda * column_penalty(&theta, d, j);
    let mut prev_theta = theta.clone();
    let mut prev_b = b;
    let mut best = (theta.clone(), b, objective);
    let mut trace = vec![objective];
    let mut momentum = Momentum::default();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < config.max_iters {
        let w = if accelerated { momentum.weight() } else { 0.0 };
        let (next_theta, next_b) = if w == 0.0 {
            let (g, gb) = column_gradients_from_residual(blocks, &resid, dataset, j);
            prox_step(&theta, b, &g, gb, lipschitz, lambda, d, j)
        } else {
            let p = &theta + (&theta - &prev_theta) * w;
            let bp = b + w * (b - prev_b);
            let r = column_residual(blocks, &p, bp, dataset, j);
            let (g, gb) = column_gradients_from_residual(blocks, &r, dataset, j);
            prox_step(&p, bp, &g, gb, lipschitz, lambda, d, j)
        };
        prev_theta = std::mem::replace(&mut theta, next_theta);
        prev_b = std::mem::replace(&mut b, next_b);
        resid = column_residual(blocks, &theta, b, dataset, j);
        let last = objective;
        objective = 0.5 * resid.norm_squared() + lambda * column_penalty(&theta, d, j);
        iterations += 1;
        if accelerated {
            momentum.advance();
        }
        trace.push(objective);
        if !objective.is_finite() {
            break;
        }
        let settled = (objective - last).abs() <= config.tol * objective.abs().max(f64::MIN_POSITIVE);
        if objective <= best.2 {
            let gain = best.2 - objective;
            best = (theta.clone(), b, objective);
            converged = settled && gain <= config.tol * objective.abs().max(f64::MIN_POSITIVE);
        } else {
            converged = settled;
        }
        if converged {
            break;
        }
    }
    let (theta, b) = if accelerated { (best.0, best.1) } else { (theta, b) };
    ColumnRun {
        theta,
        b,
        iterations,
        converged,
        trace,
    }
}

/// Solves every column problem independently (in parallel when enabled).
pub(crate) fn run_engine(
    solver: &'static str,
    blocks: &[DMatrix<f64>],
    dataset: &Dataset,
    config: &SolverConfig,
    accelerated: bool,
    warm: Option<(&BlockGrid, &DVector<f64>)>,
) -> Result<EngineOutcome> {
    config.validate()?;
    let n = dataset.nodes();
    let d = blocks[0].ncols();
    let runs = par::map_range(config.execution, n, |j| {
        let lipschitz = column_lipschitz(blocks, &dataset.x().column(j).into_owned(), j);
        let start = match warm {
            Some((g, bd)) if g.block_len() == d && g.nodes() == n => {
                let mut t = g.column(j).clone();
                t.rows_mut(j * d, d).fill(0.0);
                (t, bd[j])
            }
            _ => (DVector::zeros(n * d), 0.0),
        };
        run_column(blocks, dataset, config, accelerated, lipschitz, start, j)
    });
    if let Some(bad) = runs.iter().find(|r| !r.trace.last().is_some_and(|v| v.is_finite())) {
        return Err(Error::Diverged {
            solver,
            iteration: bad.iterations,
        });
    }
    let iterations = runs.iter().map(|r| r.iterations).max().unwrap_or(0);
    let trace = if config.record_trace {
        // finished columns hold their final value
        (0..=iterations)
            .map(|k| runs.iter().map(|r| r.trace[k.min(r.trace.len() - 1)]).sum())
            .collect()
    } else {
        Vec::new()
    };
    let converged = runs.iter().all(|r| r.converged);
    let mut theta = BlockGrid::zeros(n, d);
    let mut b_diag = DVector::zeros(n);
    for (j, r) in runs.into_iter().enumerate() {
        theta.set_column(j, r.theta);
        b_diag[j] = r.b;
    }
    Ok(EngineOutcome {
        theta,
        b_diag,
        iterations,
        converged,
        trace,
    })
}

/// Iteration state of the kernel PG solver over `zeta_ij = K_i^{1/2} alpha_ij`.
#[derive(Debug, Clone)]
pub struct PgState {
    pub zeta: BlockGrid,
    pub b_diag: DVector<f64>,
    pub lipschitz: Vec<f64>,
    pub iter: usize,
    pub objective_trace: Vec<f64>,
}

impl PgState {
    pub fn new(kernels: &KernelSet, dataset: &Dataset) -> Self {
        let n = dataset.nodes();
        PgState {
            zeta: BlockGrid::zeros(n, dataset.samples()),
            b_diag: DVector::zeros(n),
            lipschitz: (0..n).map(|j| lipschitz_constant(kernels, dataset, j)).collect(),
            iter: 0,
            objective_trace: Vec::new(),
        }
    }

    /// `1/2 ||Y - K-breve Z - X B||^2 + lambda sum ||zeta_ij||`.
    pub fn objective(&self, dataset: &Dataset, kernels: &KernelSet, lambda: f64) -> f64 {
        (0..dataset.nodes())
            .map(|j| {
                let r = column_residual(&kernels.sqrt_per_node, self.zeta.column(j), self.b_diag[j], dataset, j);
                0.5 * r.norm_squared() + lambda * column_penalty(self.zeta.column(j), self.zeta.block_len(), j)
            })
            .sum()
    }
}

/// Iteration state of the accelerated solver.
#[derive(Debug, Clone)]
pub struct ApgState {
    pub pg: PgState,
    pub prev_zeta: BlockGrid,
    pub prev_b: DVector<f64>,
    pub momentum: Momentum,
}

impl ApgState {
    pub fn new(kernels: &KernelSet, dataset: &Dataset) -> Self {
        let pg = PgState::new(kernels, dataset);
        ApgState {
            prev_zeta: pg.zeta.clone(),
            prev_b: pg.b_diag.clone(),
            pg,
            momentum: Momentum::default(),
        }
    }
}

/// Analytic gradients at the current point: `(grad_zeta_j, grad_b_jj)`.
/// The returned vector stacks all `N` blocks with block `j` zero.
pub fn pg_gradients(state: &PgState, dataset: &Dataset, kernels: &KernelSet, j: usize) -> (DVector<f64>, f64) {
    let r = column_residual(
        &kernels.sqrt_per_node,
        state.zeta.column(j),
        state.b_diag[j],
        dataset,
        j,
    );
    column_gradients_from_residual(&kernels.sqrt_per_node, &r, dataset, j)
}

/// One PG update of column `j`.
pub fn pg_step(state: &mut PgState, dataset: &Dataset, kernels: &KernelSet, config: &SolverConfig, j: usize) {
    let (g, gb) = pg_gradients(state, dataset, kernels, j);
    let (zeta, b) = prox_step(
        state.zeta.column(j),
        state.b_diag[j],
        &g,
        gb,
        state.lipschitz[j],
        config.lambda,
        dataset.samples(),
        j,
    );
    state.zeta.set_column(j, zeta);
    state.b_diag[j] = b;
}

/// Extrapolated point `(z_j, d_jj)` of column `j`.
pub fn apg_extrapolate(state: &ApgState, j: usize) -> (DVector<f64>, f64) {
    let w = state.momentum.weight();
    let cur = state.pg.zeta.column(j);
    let b = state.pg.b_diag[j];
    (
        cur + (cur - state.prev_zeta.column(j)) * w,
        b + w * (b - state.prev_b[j]),
    )
}

/// Gradients of the smooth term at the extrapolated point of column `j`.
pub fn apg_gradients(state: &ApgState, dataset: &Dataset, kernels: &KernelSet, j: usize) -> (DVector<f64>, f64) {
    let (z, d) = apg_extrapolate(state, j);
    let r = column_residual(&kernels.sqrt_per_node, &z, d, dataset, j);
    column_gradients_from_residual(&kernels.sqrt_per_node, &r, dataset, j)
}

/// One full APG iteration over all columns.
pub fn apg_step(state: &mut ApgState, dataset: &Dataset, kernels: &KernelSet, config: &SolverConfig) {
    let m = dataset.samples();
    let current = state.pg.zeta.clone();
    let current_b = state.pg.b_diag.clone();
    for j in 0..dataset.nodes() {
        // Columns are independent, so updating earlier ones does not move this point.
        let (z, dj) = apg_extrapolate(state, j);
        let (g, gb) = apg_gradients(state, dataset, kernels, j);
        let (zeta, b) = prox_step(&z, dj, &g, gb, state.pg.lipschitz[j], config.lambda, m, j);
        state.pg.zeta.set_column(j, zeta);
        state.pg.b_diag[j] = b;
    }
    state.prev_zeta = current;
    state.prev_b = current_b;
    state.momentum.advance();
    state.pg.iter += 1;
}

fn kernel_estimate(
    kind: SolverKind,
    kernels: &KernelSet,
    dataset: &Dataset,
    config: &SolverConfig,
    out: EngineOutcome,
) -> TopologyEstimate {
    let alpha = out.theta.map_blocks(&kernels.pinv_sqrt_per_node);
    let coeffs = DualCoefficients { blocks: alpha };
    let objective = objective_value(dataset, kernels, &coeffs, &out.b_diag, config.lambda);
    let scores = match config.score_rule {
        ScoreRule::Native => out.theta.block_norms(),
        ScoreRule::KernelWeighted => coeffs.blocks.map_blocks(&kernels.sqrt_per_node).block_norms(),
    };
    TopologyEstimate {
        adjacency: edges_from_scores(&scores, config.tau),
        scores,
        b_diag: out.b_diag,
        coefficients: Coefficients::Dual(coeffs),
        native: out.theta,
        admm_aux: None,
        meta: EstimateMeta {
            solver: kind,
            iterations: out.iterations,
            objective,
            converged: out.converged,
            tau: config.tau,
            lambda: config.lambda,
            score_rule: config.score_rule,
            objective_trace: out.trace,
        },
    }
}

fn check_shapes(kernels: &KernelSet, dataset: &Dataset) -> Result<()> {
    if kernels.nodes() != dataset.nodes() || kernels.samples() != dataset.samples() {
        return Err(Error::DimensionMismatch(format!(
            "kernel set is {} nodes x {} samples, dataset is {} x {}",
            kernels.nodes(),
            kernels.samples(),
            dataset.nodes(),
            dataset.samples()
        )));
    }
    Ok(())
}

fn warm_from(warm: Option<&TopologyEstimate>) -> Option<(&BlockGrid, &DVector<f64>)> {
    warm.filter(|w| matches!(w.meta.solver, SolverKind::Pg | SolverKind::Apg))
        .map(|w| (&w.native, &w.b_diag))
}

pub fn run_pg(dataset: &Dataset, kernels: &KernelSet, config: &SolverConfig) -> Result<TopologyEstimate> {
    run_pg_warm(dataset, kernels, config, None)
}

pub fn run_pg_warm(
    dataset: &Dataset,
    kernels: &KernelSet,
    config: &SolverConfig,
    warm: Option<&TopologyEstimate>,
) -> Result<TopologyEstimate> {
    check_shapes(kernels, dataset)?;
    let out = run_engine("pg", &kernels.sqrt_per_node, dataset, config, false, warm_from(warm))?;
    Ok(kernel_estimate(SolverKind::Pg, kernels, dataset, config, out))
}

pub fn run_apg(dataset: &Dataset, kernels: &KernelSet, config: &SolverConfig) -> Result<TopologyEstimate> {
    run_apg_warm(dataset, kernels, config, None)
}

pub fn run_apg_warm(
    dataset: &Dataset,
    kernels: &KernelSet,
    config: &SolverConfig,
    warm: Option<&TopologyEstimate>,
) -> Result<TopologyEstimate> {
    check_shapes(kernels, dataset)?;
    let out = run_engine("apg", &kernels.sqrt_per_node, dataset, config, true, warm_from(warm))?;
    Ok(kernel_estimate(SolverKind::Apg, kernels, dataset, config, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{build_kernel_set, KernelSpec, Ridge};
    use crate::par::Execution;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(seed: u64, m: usize, n: usize) -> (Dataset, KernelSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let x = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let ds = Dataset::new(y, x).unwrap();
        let ks = build_kernel_set(
            &KernelSpec::Polynomial { order: 2 },
            ds.y(),
            Ridge::Absolute(0.0),
            Execution::Sequential,
        )
        .unwrap();
        (ds, ks)
    }

    fn dense_lambda_max(p: &DMatrix<f64>) -> f64 {
        nalgebra::SymmetricEigen::new(p.transpose() * p).eigenvalues.max()
    }

    #[test]
    fn power_iteration_on_large_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let a = DMatrix::from_fn(300, 300, |_, _| rng.random_range(-1.0..1.0));
        let g = a.transpose() * &a;
        let exact = nalgebra::SymmetricEigen::new(g.clone()).eigenvalues.max();
        let est = max_eigenvalue_psd(&g);
        assert!(est <= exact * (1.0 + 1e-9) || est == g.trace());
        assert!(est >= exact * 0.99, "{est} vs {exact}");
    }

    #[test]
    fn lipschitz_examples() {
        let i = DMatrix::<f64>::identity(4, 4);
        assert!((lipschitz_of_matrix(&i) - 1.01).abs() < 1e-6);
        assert!((lipschitz_of_matrix(&(i * 2.0)) - 4.04).abs() < 1e-5);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let p = DMatrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
            let got = lipschitz_of_matrix(&p) / LIPSCHITZ_SAFETY;
            let want = dense_lambda_max(&p);
            assert!((got - want).abs() <= 1e-5 * want, "{got} vs {want}");
        }
    }

    #[test]
    fn column_lipschitz_matches_explicit_p() {
        let (ds, ks) = instance(4, 5, 3);
        for j in 0..3 {
            let mut p = DMatrix::zeros(5, 2 * 5 + 1);
            let mut c = 0;
            for i in 0..3 {
                if i != j {
                    p.view_mut((0, c), (5, 5)).copy_from(&ks.sqrt_per_node[i]);
                    c += 5;
                }
            }
            p.column_mut(10).copy_from(&ds.x().column(j));
            let want = dense_lambda_max(&p) * LIPSCHITZ_SAFETY;
            let got = lipschitz_constant(&ks, &ds, j);
            assert!((got - want).abs() <= 1e-5 * want);
        }
    }

    #[test]
    fn gradients_at_zero() {
        let (ds, ks) = instance(5, 4, 3);
        let st = PgState::new(&ks, &ds);
        for j in 0..3 {
            let (g, gb) = pg_gradients(&st, &ds, &ks, j);
            for i in 0..3 {
                let blk = g.rows(i * 4, 4);
                if i == j {
                    assert_eq!(blk.norm(), 0.0);
                } else {
                    let want = -(ks.sqrt_per_node[i].tr_mul(&ds.y().column(j)));
                    assert!((blk - want).norm() < 1e-12);
                }
            }
            assert!((gb + ds.y().column(j).dot(&ds.x().column(j))).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lambda_step_is_plain_gradient_step() {
        let (ds, ks) = instance(6, 4, 3);
        let mut st = PgState::new(&ks, &ds);
        let cfg = SolverConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let (g, gb) = pg_gradients(&st, &ds, &ks, 1);
        let l = st.lipschitz[1];
        pg_step(&mut st, &ds, &ks, &cfg, 1);
        let want = -g / l;
        assert!((st.zeta.column(1) - want).norm() < 1e-14);
        assert!((st.b_diag[1] + gb / l).abs() < 1e-14);
    }

    #[test]
    fn huge_lambda_zeroes_all_blocks() {
        let (ds, ks) = instance(7, 4, 3);
        let mut st = PgState::new(&ks, &ds);
        let cfg = SolverConfig {
            lambda: 1e9,
            ..Default::default()
        };
        for j in 0..3 {
            pg_step(&mut st, &ds, &ks, &cfg, j);
        }
        assert_eq!(st.zeta.frobenius_norm(), 0.0);
    }

    #[test]
    fn scripted_single_step() {
        // one step from zero: z = K-breve^T y / L, then shrink each block
        let (ds, ks) = instance(8, 4, 3);
        let mut st = PgState::new(&ks, &ds);
        let cfg = SolverConfig {
            lambda: 0.05,
            ..Default::default()
        };
        let j = 2;
        pg_step(&mut st, &ds, &ks, &cfg, j);
        let l = st.lipschitz[j];
        for i in 0..2 {
            let z = ks.sqrt_per_node[i].tr_mul(&ds.y().column(j)) / l;
            let nz = z.norm();
            let want = if nz > cfg.lambda / l {
                &z * ((nz - cfg.lambda / l) / nz)
            } else {
                z * 0.0
            };
            assert!((st.zeta.block(i, j) - want).norm() < 1e-13);
        }
        let b = ds.y().column(j).dot(&ds.x().column(j)) / l;
        assert!((st.b_diag[j] - b).abs() < 1e-13);
    }

    #[test]
    fn momentum_sequence() {
        let mut mom = Momentum::default();
        assert_eq!(mom.weight(), 0.0);
        mom.advance();
        assert_eq!(mom.weight(), 0.0);
        let mut prev = mom.beta();
        for k in 1..200 {
            assert!(mom.beta() >= (k as f64 + 1.0) / 2.0);
            mom.advance();
            assert_eq!(mom.beta(), Momentum::next_beta(prev));
            assert!(mom.beta() > prev);
            prev = mom.beta();
        }
    }

    #[test]
    fn first_apg_step_equals_pg_step() {
        let (ds, ks) = instance(9, 5, 3);
        let cfg = SolverConfig {
            lambda: 0.1,
            ..Default::default()
        };
        let mut pg = PgState::new(&ks, &ds);
        for j in 0..3 {
            pg_step(&mut pg, &ds, &ks, &cfg, j);
        }
        let mut apg = ApgState::new(&ks, &ds);
        apg_step(&mut apg, &ds, &ks, &cfg);
        assert!((apg.pg.zeta.columns()[0].clone() - pg.zeta.column(0)).norm() < 1e-15);
        assert_eq!(apg.pg.b_diag, pg.b_diag);
    }

    #[test]
    fn zero_data_converges_immediately() {
        let (ds, ks) = instance(10, 4, 3);
        let ds0 = Dataset::new(DMatrix::zeros(4, 3), ds.x().clone()).unwrap();
        let ks0 = build_kernel_set(
            &KernelSpec::Polynomial { order: 2 },
            ds0.y(),
            Ridge::Absolute(0.0),
            Execution::Sequential,
        )
        .unwrap();
        let _ = ks;
        let est = run_pg(&ds0, &ks0, &SolverConfig::default()).unwrap();
        assert_eq!(est.meta.iterations, 1);
        assert!(est.meta.converged);
        assert_eq!(est.edge_count(), 0);
        assert_eq!(est.b_diag, DVector::zeros(3));
    }

    #[test]
    fn engine_matches_scripted_steps() {
        let (ds, ks) = instance(12, 5, 3);
        let cfg = SolverConfig {
            lambda: 0.05,
            max_iters: 7,
            tol: 1e-300,
            ..Default::default()
        };
        let est = run_pg(&ds, &ks, &cfg).unwrap();
        let mut st = PgState::new(&ks, &ds);
        for _ in 0..7 {
            for j in 0..3 {
                pg_step(&mut st, &ds, &ks, &cfg, j);
            }
        }
        assert!((est.native.frobenius_norm() - st.zeta.frobenius_norm()).abs() < 1e-12);
        for j in 0..3 {
            assert!((est.native.column(j) - st.zeta.column(j)).norm() < 1e-12);
        }
    }

    #[test]
    fn apg_engine_matches_scripted_steps() {
        let (ds, ks) = instance(14, 5, 3);
        let cfg = SolverConfig {
            lambda: 0.05,
            max_iters: 9,
            tol: 1e-300,
            record_trace: true,
            ..Default::default()
        };
        let est = run_apg(&ds, &ks, &cfg).unwrap();
        let mut st = ApgState::new(&ks, &ds);
        let mut objs = vec![st.pg.objective(&ds, &ks, cfg.lambda)];
        for _ in 0..9 {
            apg_step(&mut st, &ds, &ks, &cfg);
            objs.push(st.pg.objective(&ds, &ks, cfg.lambda));
        }
        for (a, b) in est.meta.objective_trace.iter().zip(&objs) {
            assert!((a - b).abs() < 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn surviving_blocks_shrink_with_lambda() {
        let (ds, ks) = instance(15, 8, 4);
        let mut prev = usize::MAX;
        for lambda in [0.01, 0.1, 1.0] {
            let cfg = SolverConfig {
                lambda,
                tau: 1e-9,
                max_iters: 5000,
                tol: 1e-10,
                ..Default::default()
            };
            let est = run_apg(&ds, &ks, &cfg).unwrap();
            let count = est.native.block_norms().iter().filter(|&&v| v > 0.0).count();
            assert!(count <= prev);
            prev = count;
        }
    }
}
