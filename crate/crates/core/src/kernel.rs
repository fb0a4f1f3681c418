//! Kernel evaluation, per-node Gram matrices, PSD square roots and the
//! matrix-inversion-lemma solve used by the ADMM solver.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};

/// Relative eigenvalue tolerance below which a Gram matrix is rejected as non-PSD.
pub const PSD_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `k(x, y) = sum_{p=1..order} (x y)^p`
    Polynomial { order: usize },
    /// `k(x, y) = exp(-(x - y)^2 / (2 bandwidth))`, `bandwidth` being the variance.
    Gaussian { bandwidth: f64 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Polynomial { order } if order == 0 => {
                Err(Error::Config("polynomial kernel order must be >= 1".into()))
            }
            KernelSpec::Gaussian { bandwidth } if !(bandwidth > 0.0 && bandwidth.is_finite()) => Err(Error::Config(
                format!("gaussian bandwidth must be positive, got {bandwidth}"),
            )),
            _ => Ok(()),
        }
    }

    /// Unchecked evaluation for validated, finite inputs.
    #[inline]
    pub fn value(&self, x: f64, y: f64) -> f64 {
        match *self {
            KernelSpec::Polynomial { order } => {
                let xy = x * y;
                let mut term = xy;
                let mut acc = 0.0;
                for _ in 0..order {
                    acc += term;
                    term *= xy;
                }
                acc
            }
            KernelSpec::Gaussian { bandwidth } => {
                let d = x - y;
                (-(d * d) / (2.0 * bandwidth)).exp()
            }
        }
    }

    /// Parses `poly:P` or `gauss:SIGMA2`.
    pub fn parse(s: &str) -> Result<Self> {
        let (kind, arg) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("kernel `{s}`: expected poly:P or gauss:S2")))?;
        let spec = match kind {
            "poly" | "polynomial" => KernelSpec::Polynomial {
                order: arg
                    .parse()
                    .map_err(|_| Error::Config(format!("bad polynomial order `{arg}`")))?,
            },
            "gauss" | "gaussian" | "rbf" => KernelSpec::Gaussian {
                bandwidth: arg
                    .parse()
                    .map_err(|_| Error::Config(format!("bad gaussian bandwidth `{arg}`")))?,
            },
            _ => return Err(Error::Config(format!("unknown kernel `{kind}`"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl std::fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KernelSpec::Polynomial { order } => write!(f, "poly:{order}"),
            KernelSpec::Gaussian { bandwidth } => write!(f, "gauss:{bandwidth}"),
        }
    }
}

pub fn eval_kernel(spec: &KernelSpec, x: f64, y: f64) -> Result<f64> {
    spec.validate()?;
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::InvalidInput(format!(
            "kernel arguments must be finite, got ({x}, {y})"
        )));
    }
    Ok(spec.value(x, y))
}

/// Diagonal loading added to each Gram matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Ridge {
    Absolute(f64),
    /// Multiplied by `trace(K_i) / M` per node.
    Relative(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::Relative(1e-8)
    }
}

impl Ridge {
    fn validate(&self) -> Result<()> {
        let v = match *self {
            Ridge::Absolute(v) | Ridge::Relative(v) => v,
        };
        if v >= 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("ridge must be nonnegative, got {v}")))
        }
    }

    fn amount(&self, gram: &DMatrix<f64>) -> f64 {
        match *self {
            Ridge::Absolute(v) => v,
            Ridge::Relative(v) => v * gram.trace() / gram.nrows() as f64,
        }
    }
}

/// Gram matrix `K[k, l] = k(s_k, s_l)`, exactly symmetric.
pub fn gram_matrix(spec: &KernelSpec, samples: &[f64]) -> DMatrix<f64> {
    let m = samples.len();
    let mut k = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in a..m {
            let v = spec.value(samples[a], samples[b]);
            k[(a, b)] = v;
            k[(b, a)] = v;
        }
    }
    k
}

/// Cross-kernel `C[k, l] = k(train_k, test_l)`.
pub fn cross_gram(spec: &KernelSpec, train: &[f64], test: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(train.len(), test.len(), |a, b| spec.value(train[a], test[b]))
}

/// Eigen-based factorization of a symmetric PSD matrix.
#[derive(Debug, Clone)]
pub struct PsdFactor {
    pub sqrt: DMatrix<f64>,
    pub pinv_sqrt: DMatrix<f64>,
    pub max_eig: f64,
    pub min_eig: f64,
}

impl PsdFactor {
    pub fn new(k: &DMatrix<f64>) -> Result<Self> {
        let m = k.nrows();
        if m != k.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "expected square matrix, got {}x{}",
                m,
                k.ncols()
            )));
        }
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("matrix has non-finite entries".into()));
        }
        let scale = k.abs().max().max(f64::MIN_POSITIVE);
        let asym = (k - k.transpose()).abs().max();
        if asym > 1e-10 * scale {
            return Err(Error::InvalidInput(format!(
                "matrix is not symmetric (max asymmetry {asym:e})"
            )));
        }
        let sym = (k + k.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let max_eig = eig.eigenvalues.max();
        let min_eig = eig.eigenvalues.min();
        if min_eig < -PSD_TOLERANCE * max_eig.max(0.0) || (max_eig <= 0.0 && min_eig < 0.0) {
            return Err(Error::KernelNotPsd { min_eig, max_eig });
        }
        let cutoff = numerical_zero(m, max_eig);
        let root = eig.eigenvalues.map(|l| if l > cutoff { l.sqrt() } else { 0.0 });
        let inv_root = eig.eigenvalues.map(|l| if l > cutoff { 1.0 / l.sqrt() } else { 0.0 });
        let v = &eig.eigenvectors;
        let sqrt = symmetrize(v * DMatrix::from_diagonal(&root) * v.transpose());
        let pinv_sqrt = symmetrize(v * DMatrix::from_diagonal(&inv_root) * v.transpose());
        Ok(PsdFactor {
            sqrt,
            pinv_sqrt,
            max_eig,
            min_eig,
        })
    }
}

/// Eigenvalues at or below this are treated as rounding noise of a zero
/// eigenvalue of an `m x m` PSD matrix.
pub fn numerical_zero(m: usize, max_eig: f64) -> f64 {
    (f64::EPSILON * m as f64).max(1e-12) * max_eig.max(0.0)
}

fn symmetrize(a: DMatrix<f64>) -> DMatrix<f64> {
    (&a + a.transpose()) * 0.5
}

/// Symmetric PSD square root with negative eigenvalues clamped to zero.
pub fn psd_sqrt(k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(PsdFactor::new(k)?.sqrt)
}

/// Per-node Gram matrices and their square roots. The block-diagonal matrix
/// `Bdiag(K_1, ..., K_N)` is only ever handled through `per_node`.
#[derive(Debug, Clone)]
pub struct KernelSet {
    pub spec: KernelSpec,
    pub ridges: Vec<f64>,
    pub per_node: Vec<DMatrix<f64>>,
    pub sqrt_per_node: Vec<DMatrix<f64>>,
    pub pinv_sqrt_per_node: Vec<DMatrix<f64>>,
    /// `(min, max)` eigenvalue of each `K_i` before clamping.
    pub eig_bounds: Vec<(f64, f64)>,
}

impl KernelSet {
    pub fn nodes(&self) -> usize {
        self.per_node.len()
    }

    pub fn samples(&self) -> usize {
        self.per_node.first().map_or(0, |k| k.nrows())
    }

    /// Dense `M x NM` concatenation `[K_1 ... K_N]`.
    pub fn concat(&self) -> DMatrix<f64> {
        let m = self.samples();
        let n = self.nodes();
        let mut out = DMatrix::zeros(m, n * m);
        for (i, k) in self.per_node.iter().enumerate() {
            out.view_mut((0, i * m), (m, m)).copy_from(k);
        }
        out
    }
}

pub fn build_kernel_set(spec: &KernelSpec, y: &DMatrix<f64>, ridge: Ridge, exec: Execution) -> Result<KernelSet> {
    spec.validate()?;
    ridge.validate()?;
    let (m, n) = y.shape();
    if m < 2 {
        return Err(Error::Validation(format!("need at least 2 samples, got {m}")));
    }
    if let Some(pos) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            matrix: "Y",
            row: pos % m,
            column: pos / m,
        });
    }
    let built = par::map_range(exec, n, |i| -> Result<_> {
        let samples: Vec<f64> = y.column(i).iter().copied().collect();
        let mut k = gram_matrix(spec, &samples);
        let r = ridge.amount(&k);
        for d in 0..m {
            k[(d, d)] += r;
        }
        let f = PsdFactor::new(&k)?;
        Ok((r, k, f))
    });
    let mut set = KernelSet {
        spec: *spec,
        ridges: Vec::with_capacity(n),
        per_node: Vec::with_capacity(n),
        sqrt_per_node: Vec::with_capacity(n),
        pinv_sqrt_per_node: Vec::with_capacity(n),
        eig_bounds: Vec::with_capacity(n),
    };
    for item in built {
        let (r, k, f) = item?;
        set.ridges.push(r);
        set.per_node.push(k);
        set.sqrt_per_node.push(f.sqrt);
        set.pinv_sqrt_per_node.push(f.pinv_sqrt);
        set.eig_bounds.push((f.min_eig, f.max_eig));
    }
    Ok(set)
}

/// Shared blocks for repeated solves with `(C^T C + rho D)` where
/// `C = [C_1 ... C_n]` (each `M x M`) and `D = Bdiag(D_1, ..., D_n)`.
#[derive(Debug, Clone)]
pub struct WoodburyBlocks {
    m: usize,
    c: Vec<DMatrix<f64>>,
    d_chol: Vec<Cholesky<f64, Dyn>>,
    /// `C_i D_i^{-1} C_i^T`
    gram: Vec<DMatrix<f64>>,
}

impl WoodburyBlocks {
    pub fn new(c: Vec<DMatrix<f64>>, d: &[DMatrix<f64>]) -> Result<Self> {
        if c.len() != d.len() || c.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "{} C blocks vs {} D blocks",
                c.len(),
                d.len()
            )));
        }
        let m = c[0].nrows();
        for (ci, di) in c.iter().zip(d) {
            if ci.shape() != (m, m) || di.shape() != (m, m) {
                return Err(Error::DimensionMismatch(format!("all blocks must be {m}x{m}")));
            }
        }
        let mut d_chol = Vec::with_capacity(d.len());
        let mut gram = Vec::with_capacity(d.len());
        for (ci, di) in c.iter().zip(d) {
            let ch = Cholesky::new(di.clone()).ok_or(Error::NumericalSingularity { dim: m })?;
            let dinv_ct = ch.solve(&ci.transpose());
            gram.push(ci * dinv_ct);
            d_chol.push(ch);
        }
        Ok(WoodburyBlocks { m, c, d_chol, gram })
    }

    pub fn block_size(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }

    /// Factor the inner `M x M` system for the listed blocks.
    pub fn factor(&self, members: Vec<usize>, rho: f64) -> Result<WoodburyFactor> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::Config(format!("rho must be positive, got {rho}")));
        }
        let m = self.m;
        let mut inner = DMatrix::identity(m, m) * rho;
        for &i in &members {
            inner += &self.gram[i];
        }
        let inner = (&inner + inner.transpose()) * 0.5;
        let chol = Cholesky::new(inner).ok_or(Error::NumericalSingularity { dim: m })?;
        Ok(WoodburyFactor {
            rho,
            members,
            inner: chol,
        })
    }
}

/// Cached factorization of `rho I + sum_i C_i D_i^{-1} C_i^T`.
#[derive(Debug, Clone)]
pub struct WoodburyFactor {
    rho: f64,
    members: Vec<usize>,
    inner: Cholesky<f64, Dyn>,
}

impl WoodburyFactor {
    /// Order of the largest system this path factorizes (never exceeds `M`).
    pub fn largest_factorized_dim(&self, blocks: &WoodburyBlocks) -> usize {
        self.inner.l_dirty().nrows().max(blocks.m)
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    /// Returns `(C^T C + rho D)^{-1} q` with `q` stacked in member order.
    pub fn solve(&self, blocks: &WoodburyBlocks, q: &DVector<f64>) -> DVector<f64> {
        let m = blocks.m;
        debug_assert_eq!(q.len(), self.members.len() * m);
        let mut u: Vec<DVector<f64>> = Vec::with_capacity(self.members.len());
        let mut acc = DVector::zeros(m);
        for (slot, &i) in self.members.iter().enumerate() {
            let ui = blocks.d_chol[i].solve(&q.rows(slot * m, m).into_owned());
            acc += &blocks.c[i] * &ui;
            u.push(ui);
        }
        let w = self.inner.solve(&acc);
        let mut out = DVector::zeros(q.len());
        for (slot, &i) in self.members.iter().enumerate() {
            let corr = blocks.d_chol[i].solve(&blocks.c[i].tr_mul(&w));
            out.rows_mut(slot * m, m).copy_from(&((&u[slot] - corr) / self.rho));
        }
        out
    }
}

/// One-shot `(C^T C + rho D)^{-1} q` via the matrix inversion lemma.
pub fn woodbury_solve(
    c_blocks: &[DMatrix<f64>],
    d_blocks: &[DMatrix<f64>],
    rho: f64,
    q: &DVector<f64>,
) -> Result<DVector<f64>> {
    let blocks = WoodburyBlocks::new(c_blocks.to_vec(), d_blocks)?;
    if q.len() != blocks.len() * blocks.m {
        return Err(Error::DimensionMismatch(format!(
            "rhs has length {}, expected {}",
            q.len(),
            blocks.len() * blocks.m
        )));
    }
    let f = blocks.factor((0..blocks.len()).collect(), rho)?;
    Ok(f.solve(&blocks, q))
}
