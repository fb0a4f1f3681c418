//! Polynomial SEM: explicit monomial features per node, solved with the same
//! proximal-gradient engine as the kernel estimator but over length-`P` blocks.
//! Order 1 is the linear SEM baseline.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::model::{
    edges_from_scores, Coefficients, Dataset, DualCoefficients, EstimateMeta, PolyCoefficients, SolverConfig,
    SolverKind, TopologyEstimate,
};
use crate::proxgrad::{column_gradients_from_residual, column_residual, run_engine};

#[derive(Debug, Clone, PartialEq)]
pub struct PolyFeatures {
    pub order: usize,
    /// `M x P` matrices with row `m` equal to `[y, y^2, ..., y^P]`.
    pub per_node: Vec<DMatrix<f64>>,
}

impl PolyFeatures {
    pub fn nodes(&self) -> usize {
        self.per_node.len()
    }

    pub fn samples(&self) -> usize {
        self.per_node.first().map_or(0, |f| f.nrows())
    }

    /// `M x NP` concatenation `[Y~_1 ... Y~_N]`.
    pub fn concat(&self) -> DMatrix<f64> {
        let (m, p) = (self.samples(), self.order);
        let mut out = DMatrix::zeros(m, p * self.nodes());
        for (i, f) in self.per_node.iter().enumerate() {
            out.view_mut((0, i * p), (m, p)).copy_from(f);
        }
        out
    }

    /// Centre and scale every feature column to unit norm per sample
    /// (zero-variance columns are only centred).
    pub fn standardize(&mut self) {
        let m = self.samples() as f64;
        for f in &mut self.per_node {
            for mut col in f.column_iter_mut() {
                let mean = col.sum() / m;
                col.add_scalar_mut(-mean);
                let sd = (col.norm_squared() / m).sqrt();
                if sd > 0.0 {
                    col /= sd;
                }
            }
        }
    }
}

pub fn build_poly_features(y: &DMatrix<f64>, order: usize) -> Result<PolyFeatures> {
    if order == 0 {
        return Err(Error::Config("polynomial order must be at least 1".into()));
    }
    let mut per_node = Vec::with_capacity(y.ncols());
    for col in y.column_iter() {
        let f = DMatrix::from_fn(y.nrows(), order, |m, p| col[m].powi(p as i32 + 1));
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::FeatureOverflow { order });
        }
        per_node.push(f);
    }
    Ok(PolyFeatures { order, per_node })
}

/// Gradients of the column-`j` least-squares term with respect to the padded
/// coefficients (node-`j` block zero) and `b_jj`.
pub fn poly_gradients(
    coeffs: &PolyCoefficients,
    features: &PolyFeatures,
    dataset: &Dataset,
    j: usize,
) -> (DVector<f64>, f64) {
    let r = column_residual(
        &features.per_node,
        coeffs.blocks.column(j),
        coeffs.b_diag[j],
        dataset,
        j,
    );
    column_gradients_from_residual(&features.per_node, &r, dataset, j)
}

/// `1/2 sum_j ||y_j - sum_i Y~_i w_ij - b_jj x_j||^2 + lambda sum ||w_ij||`.
pub fn poly_objective(coeffs: &PolyCoefficients, features: &PolyFeatures, dataset: &Dataset, lambda: f64) -> f64 {
    let n = dataset.nodes();
    (0..n)
        .map(|j| {
            let r = column_residual(
                &features.per_node,
                coeffs.blocks.column(j),
                coeffs.b_diag[j],
                dataset,
                j,
            );
            let pen: f64 = (0..n)
                .filter(|&i| i != j)
                .map(|i| coeffs.blocks.block(i, j).norm())
                .sum();
            0.5 * r.norm_squared() + lambda * pen
        })
        .sum()
}

pub fn run_poly_pg(dataset: &Dataset, order: usize, config: &SolverConfig) -> Result<TopologyEstimate> {
    let features = build_poly_features(dataset.y(), order)?;
    run_poly_with(dataset, &features, config, false, None)
}

/// Polynomial solver on prebuilt features; `accelerated` switches to FISTA.
pub fn run_poly_with(
    dataset: &Dataset,
    features: &PolyFeatures,
    config: &SolverConfig,
    accelerated: bool,
    warm: Option<&TopologyEstimate>,
) -> Result<TopologyEstimate> {
    if features.nodes() != dataset.nodes() || features.samples() != dataset.samples() {
        return Err(Error::DimensionMismatch("features do not match dataset".into()));
    }
    let kind = if features.order == 1 {
        SolverKind::Linear
    } else {
        SolverKind::Poly
    };
    let warm = warm
        .filter(|w| matches!(w.meta.solver, SolverKind::Poly | SolverKind::Linear))
        .map(|w| (&w.native, &w.b_diag));
    let name = if kind == SolverKind::Linear { "linear" } else { "poly" };
    let out = run_engine(name, &features.per_node, dataset, config, accelerated, warm)?;
    let coeffs = PolyCoefficients {
        blocks: out.theta.clone(),
        b_diag: out.b_diag.clone(),
    };
    let objective = poly_objective(&coeffs, features, dataset, config.lambda);
    let scores = out.theta.block_norms();
    Ok(TopologyEstimate {
        adjacency: edges_from_scores(&scores, config.tau),
        scores,
        b_diag: out.b_diag,
        coefficients: Coefficients::Poly(coeffs),
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
    })
}

/// Map kernel dual coefficients to primal weights `w_ij = Y~_i^T alpha_ij`.
/// Only valid when the dual solve used the matching polynomial kernel.
pub fn kernel_equivalence_map(
    dual: &DualCoefficients,
    b_diag: &DVector<f64>,
    spec: &KernelSpec,
    features: &PolyFeatures,
) -> Result<PolyCoefficients> {
    match *spec {
        KernelSpec::Polynomial { order } if order == features.order => {}
        _ => {
            return Err(Error::Config(format!(
                "kernel {spec} does not match polynomial features of order {}",
                features.order
            )))
        }
    }
    let transposed: Vec<DMatrix<f64>> = features.per_node.iter().map(|f| f.transpose()).collect();
    Ok(PolyCoefficients {
        blocks: dual.blocks.map_blocks(&transposed),
        b_diag: b_diag.clone(),
    })
}

/// Multiply-add count of one full gradient evaluation over all columns.
pub fn gradient_flops(samples: usize, nodes: usize, block_len: usize) -> usize {
    // forward product and its transpose, per column, per neighbour
    4 * samples * block_len * nodes * (nodes - 1)
}
