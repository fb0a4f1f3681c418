//! Uniform entry point over the five solvers, plus out-of-sample prediction.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::admm::run_admm_warm;
use crate::error::{Error, Result};
use crate::kernel::{build_kernel_set, cross_gram, KernelSet, KernelSpec};
use crate::model::{Coefficients, Dataset, SolverConfig, SolverKind, TopologyEstimate};
use crate::polysem::{build_poly_features, run_poly_with, PolyFeatures};
use crate::proxgrad::{run_apg_warm, run_pg_warm};

/// A solver together with its feature map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Method {
    pub solver: SolverKind,
    /// Used by the kernel solvers.
    pub kernel: KernelSpec,
    /// Used by `poly`; `linear` always uses order 1.
    pub poly_order: usize,
}

impl Method {
    pub fn kernel(solver: SolverKind, kernel: KernelSpec) -> Self {
        Method {
            solver,
            kernel,
            poly_order: 1,
        }
    }

    pub fn poly(order: usize) -> Self {
        Method {
            solver: SolverKind::Poly,
            kernel: KernelSpec::Polynomial { order },
            poly_order: order,
        }
    }

    pub fn linear() -> Self {
        Method {
            solver: SolverKind::Linear,
            kernel: KernelSpec::Polynomial { order: 1 },
            poly_order: 1,
        }
    }

    pub fn order(&self) -> usize {
        if self.solver == SolverKind::Linear {
            1
        } else {
            self.poly_order
        }
    }

    /// Short display label, e.g. `apg[gauss:0.01]` or `poly[2]`.
    pub fn label(&self) -> String {
        if self.solver.uses_kernel() {
            format!("{}[{}]", self.solver, self.kernel)
        } else if self.solver == SolverKind::Poly {
            format!("poly[{}]", self.poly_order)
        } else {
            "linear".into()
        }
    }

    /// Inverse of [`Method::label`].
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "linear" {
            return Ok(Method::linear());
        }
        let (head, arg) = s.strip_suffix(']').and_then(|t| t.split_once('[')).ok_or_else(|| {
            Error::Config(format!(
                "method `{s}`: expected e.g. apg[gauss:0.01], poly[2] or linear"
            ))
        })?;
        let solver: SolverKind = head.parse()?;
        match solver {
            SolverKind::Poly => {
                let order = arg
                    .parse()
                    .ok()
                    .filter(|&p: &usize| p >= 1)
                    .ok_or_else(|| Error::Config(format!("bad polynomial order `{arg}`")))?;
                Ok(Method::poly(order))
            }
            SolverKind::Linear => Err(Error::Config("linear takes no argument".into())),
            _ => Ok(Method::kernel(solver, KernelSpec::parse(arg)?)),
        }
    }

    pub fn prepare(&self, dataset: &Dataset, config: &SolverConfig) -> Result<Prepared> {
        config.validate()?;
        if self.solver.uses_kernel() {
            self.kernel.validate()?;
            Ok(Prepared::Kernel(build_kernel_set(
                &self.kernel,
                dataset.y(),
                config.ridge,
                config.execution,
            )?))
        } else {
            Ok(Prepared::Poly(build_poly_features(dataset.y(), self.order())?))
        }
    }

    pub fn solve(&self, dataset: &Dataset, config: &SolverConfig) -> Result<TopologyEstimate> {
        let prepared = self.prepare(dataset, config)?;
        self.solve_prepared(dataset, &prepared, config, None)
    }

    /// Solve with features built once; `warm` must come from the same method.
    pub fn solve_prepared(
        &self,
        dataset: &Dataset,
        prepared: &Prepared,
        config: &SolverConfig,
        warm: Option<&TopologyEstimate>,
    ) -> Result<TopologyEstimate> {
        match (self.solver, prepared) {
            (SolverKind::Admm, Prepared::Kernel(ks)) => run_admm_warm(dataset, ks, config, warm),
            (SolverKind::Pg, Prepared::Kernel(ks)) => run_pg_warm(dataset, ks, config, warm),
            (SolverKind::Apg, Prepared::Kernel(ks)) => run_apg_warm(dataset, ks, config, warm),
            (SolverKind::Poly | SolverKind::Linear, Prepared::Poly(f)) => {
                run_poly_with(dataset, f, config, false, warm)
            }
            _ => Err(Error::Config(format!(
                "prepared features do not fit solver {}",
                self.solver
            ))),
        }
    }
}

pub enum Prepared {
    Kernel(KernelSet),
    Poly(PolyFeatures),
}

/// Predicted endogenous values `Y_hat` (rows of `test`) from a model fitted on
/// `train`. Kernel predictions evaluate `k(y_train, y_test)` only, so no test
/// sample ever enters the fitted kernel matrices.
pub fn predict(method: &Method, estimate: &TopologyEstimate, train: &Dataset, test: &Dataset) -> Result<DMatrix<f64>> {
    let n = train.nodes();
    if test.nodes() != n {
        return Err(Error::DimensionMismatch(format!(
            "train has {n} nodes, test has {}",
            test.nodes()
        )));
    }
    let maps: Vec<DMatrix<f64>> = match &estimate.coefficients {
        Coefficients::Dual(_) => (0..n)
            .map(|i| {
                cross_gram(
                    &method.kernel,
                    train.y().column(i).as_slice(),
                    test.y().column(i).as_slice(),
                )
                .transpose()
            })
            .collect(),
        Coefficients::Poly(_) => build_poly_features(test.y(), method.order())?.per_node,
    };
    let blocks = match &estimate.coefficients {
        Coefficients::Dual(c) => &c.blocks,
        Coefficients::Poly(c) => &c.blocks,
    };
    let mut out = DMatrix::zeros(test.samples(), n);
    for j in 0..n {
        let mut col = test.x().column(j) * estimate.b_diag[j];
        for i in 0..n {
            if i != j {
                col += &maps[i] * blocks.block(i, j);
            }
        }
        out.set_column(j, &col);
    }
    Ok(out)
}
