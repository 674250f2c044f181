//! The constrained stochastic bilevel problem
//!
//! ```text
//!   min_{x ∈ X}  F(x) = E[f(x, y*(x); ξ)]
//!   y*(x) ∈ argmin_y { E[g(x, y; ζ)]  :  A x − B y − b ≤ 0 }
//! ```
//!
//! Solvers see a problem only through [`BilevelProblem`]: stochastic value and
//! gradient oracles, the linear constraint data, and the upper-level set.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::operator_norm;
use crate::rng::NoiseStream;

/// Row-wise nonzeros of a matrix; products cost `O(nnz)`.
#[derive(Clone, Debug)]
struct SparseRows {
    rows: Vec<Vec<(usize, f64)>>,
    cols: usize,
}

impl SparseRows {
    fn from_dense(mat: &DMatrix<f64>) -> Self {
        let rows = (0..mat.nrows())
            .map(|i| {
                (0..mat.ncols())
                    .filter_map(|j| {
                        let v = mat[(i, j)];
                        (v != 0.0).then_some((j, v))
                    })
                    .collect()
            })
            .collect();
        Self {
            rows,
            cols: mat.ncols(),
        }
    }

    fn mul(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows
                .iter()
                .map(|r| r.iter().map(|&(j, a)| a * v[j]).sum::<f64>()),
        )
    }

    fn tr_mul(&self, w: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.cols);
        for (r, &wi) in self.rows.iter().zip(w.iter()) {
            if wi != 0.0 {
                for &(j, a) in r {
                    out[j] += a * wi;
                }
            }
        }
        out
    }
}

/// Linear coupling constraints `h(x, y) = A x − B y − b ≤ 0`.
#[derive(Clone, Debug)]
pub struct LinearConstraints {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    rhs: DVector<f64>,
    a_rows: SparseRows,
    b_rows: SparseRows,
    norm_a: f64,
    norm_b: f64,
}

impl LinearConstraints {
    /// `a` is `p × n`, `b` is `p × m`, `rhs` has length `p`.
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, rhs: DVector<f64>) -> Result<Self> {
        if a.nrows() != b.nrows() || a.nrows() != rhs.len() {
            return Err(Error::DimensionMismatch(format!(
                "A is {}x{}, B is {}x{}, b has {} entries",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                rhs.len()
            )));
        }
        let norm_a = operator_norm(&a);
        let norm_b = operator_norm(&b);
        Ok(Self {
            a_rows: SparseRows::from_dense(&a),
            b_rows: SparseRows::from_dense(&b),
            a,
            b,
            rhs,
            norm_a,
            norm_b,
        })
    }

    /// No lower-level constraints (`p = 0`).
    pub fn unconstrained(n: usize, m: usize) -> Self {
        Self::new(DMatrix::zeros(0, n), DMatrix::zeros(0, m), DVector::zeros(0))
            .expect("empty constraints are consistent")
    }

    /// Encodes `lo ≤ y ≤ hi` componentwise as `2m` rows: the first `m` rows are
    /// `y − hi ≤ 0` (B = −I) and the last `m` rows are `lo − y ≤ 0` (B = I).
    pub fn lower_box(n: usize, m: usize, lo: f64, hi: f64) -> Self {
        let mut b = DMatrix::zeros(2 * m, m);
        let mut rhs = DVector::zeros(2 * m);
        for i in 0..m {
            b[(i, i)] = -1.0;
            rhs[i] = hi;
            b[(m + i, i)] = 1.0;
            rhs[m + i] = -lo;
        }
        Self::new(DMatrix::zeros(2 * m, n), b, rhs).expect("box encoding is consistent")
    }

    pub fn rows(&self) -> usize {
        self.rhs.len()
    }

    pub fn upper_dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn lower_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn rhs(&self) -> &DVector<f64> {
        &self.rhs
    }

    pub fn norm_a(&self) -> f64 {
        self.norm_a
    }

    pub fn norm_b(&self) -> f64 {
        self.norm_b
    }

    /// `h = A x − B y − b`.
    pub fn values(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.upper_dim() || y.len() != self.lower_dim() {
            return Err(Error::DimensionMismatch(format!(
                "constraints expect x in R^{} and y in R^{}, got {} and {}",
                self.upper_dim(),
                self.lower_dim(),
                x.len(),
                y.len()
            )));
        }
        Ok(self.values_unchecked(x, y))
    }

    pub(crate) fn values_unchecked(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        self.a_mul(x) - self.b_mul(y) - &self.rhs
    }

    /// `A x`.
    pub fn a_mul(&self, x: &DVector<f64>) -> DVector<f64> {
        self.a_rows.mul(x)
    }

    /// `B y`.
    pub fn b_mul(&self, y: &DVector<f64>) -> DVector<f64> {
        self.b_rows.mul(y)
    }

    /// `Aᵀ v`.
    pub fn a_tr_mul(&self, v: &DVector<f64>) -> DVector<f64> {
        self.a_rows.tr_mul(v)
    }

    /// `Bᵀ v`.
    pub fn b_tr_mul(&self, v: &DVector<f64>) -> DVector<f64> {
        self.b_rows.tr_mul(v)
    }

    /// Row sums of `|B|ᵀ diag(w) |B|`, a Gershgorin bound on the spectrum of
    /// `Bᵀ diag(w) B` for `w ≥ 0`.
    pub fn weighted_gram_row_bound(&self, w: &DVector<f64>) -> f64 {
        let abs_row_sums =
            DVector::from_iterator(self.rows(), self.b_rows.rows.iter().map(|r| {
                r.iter().map(|&(_, a)| a.abs()).sum::<f64>()
            }));
        let weighted = abs_row_sums.component_mul(w);
        let mut out = DVector::zeros(self.lower_dim());
        for (r, &wi) in self.b_rows.rows.iter().zip(weighted.iter()) {
            if wi != 0.0 {
                for &(j, a) in r {
                    out[j] += a.abs() * wi;
                }
            }
        }
        out.amax()
    }
}

/// `h = A x − B y − b`; see [`LinearConstraints::values`].
pub fn constraint_values(
    c: &LinearConstraints,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    c.values(x, y)
}

/// Feasible set for the upper-level variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UpperSet {
    Free,
    Box { lo: f64, hi: f64 },
}

impl UpperSet {
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        match *self {
            UpperSet::Free => x.clone(),
            UpperSet::Box { lo, hi } => x.map(|v| v.clamp(lo, hi)),
        }
    }
}

pub fn project_upper(set: &UpperSet, x: &DVector<f64>) -> DVector<f64> {
    set.project(x)
}

/// Partial gradients of a scalar function of `(x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradPair {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
}

/// Curvature constants of the lower-level objective and of `f` in `y`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Curvature {
    /// Strong convexity of `g(x, ·)`.
    pub mu_g: f64,
    /// Smoothness of `g(x, ·)`.
    pub c_g: f64,
    /// Bound on `‖∇²_yy f‖`.
    pub c_f: f64,
}

/// Oracle access to a linearly constrained stochastic bilevel problem.
///
/// Passing `None` as the noise source evaluates the exact (expected) quantity;
/// passing a stream draws one stochastic sample. With a stream in a fixed state
/// the output is deterministic.
pub trait BilevelProblem: Sync {
    fn upper_dim(&self) -> usize;
    fn lower_dim(&self) -> usize;
    fn constraints(&self) -> &LinearConstraints;
    fn upper_set(&self) -> &UpperSet;
    fn noise_sigma(&self) -> f64;
    fn curvature(&self) -> Curvature;

    fn f_value(&self, x: &DVector<f64>, y: &DVector<f64>, noise: Option<&mut NoiseStream>) -> f64;
    fn g_value(&self, x: &DVector<f64>, y: &DVector<f64>, noise: Option<&mut NoiseStream>) -> f64;
    fn grad_f(&self, x: &DVector<f64>, y: &DVector<f64>, noise: Option<&mut NoiseStream>)
        -> GradPair;
    fn grad_g(&self, x: &DVector<f64>, y: &DVector<f64>, noise: Option<&mut NoiseStream>)
        -> GradPair;

    /// Average of `count` independent samples of `∇g`.
    fn grad_g_batch(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        count: usize,
        noise: &mut NoiseStream,
    ) -> GradPair {
        average_samples(count, |s| self.grad_g(x, y, Some(s)), noise)
    }

    /// Average of `count` independent samples of `∇f`.
    fn grad_f_batch(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        count: usize,
        noise: &mut NoiseStream,
    ) -> GradPair {
        average_samples(count, |s| self.grad_f(x, y, Some(s)), noise)
    }

    /// Exact `(∇²_yy f, ∇²_yy g)` when the problem can supply them.
    fn hessians_yy(&self) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        None
    }

    /// Whether oracles are noiseless.
    fn is_deterministic(&self) -> bool {
        self.noise_sigma() == 0.0
    }
}

fn average_samples(
    count: usize,
    mut sample: impl FnMut(&mut NoiseStream) -> GradPair,
    noise: &mut NoiseStream,
) -> GradPair {
    let count = count.max(1);
    let mut acc = sample(noise);
    for _ in 1..count {
        let s = sample(noise);
        acc.x += s.x;
        acc.y += s.y;
    }
    acc.x /= count as f64;
    acc.y /= count as f64;
    acc
}

/// One stochastic sample of `(∇f, ∇g)` at `(x, y)`; `f` is drawn first.
pub fn sample_gradients<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &DVector<f64>,
    y: &DVector<f64>,
    stream: &mut NoiseStream,
) -> (GradPair, GradPair) {
    let gf = problem.grad_f(x, y, Some(stream));
    let gg = problem.grad_g(x, y, Some(stream));
    (gf, gg)
}

/// Components of the lower-level KKT residual.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KktResidual {
    /// `‖∇_y g − Bᵀλ‖`
    pub stationarity: f64,
    /// `‖max(0, h)‖`
    pub violation: f64,
    /// `Σ λ_i · max(0, −h_i)`
    pub complementarity: f64,
}

impl KktResidual {
    pub fn compute(
        c: &LinearConstraints,
        grad_y_g: &DVector<f64>,
        h: &DVector<f64>,
        lambda: &DVector<f64>,
    ) -> Self {
        let stationarity = (grad_y_g - c.b_tr_mul(lambda)).norm();
        let violation = h.map(|v| v.max(0.0)).norm();
        let complementarity = lambda
            .iter()
            .zip(h.iter())
            .map(|(&l, &hi)| l * (-hi).max(0.0))
            .sum();
        Self {
            stationarity,
            violation,
            complementarity,
        }
    }

    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.violation)
            .max(self.complementarity)
    }
}

/// Approximate lower-level primal–dual pair.
#[derive(Clone, Debug, PartialEq)]
pub struct LowerLevelSolution {
    pub y: DVector<f64>,
    pub lambda: DVector<f64>,
    /// Max of the three [`KktResidual`] components.
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Wraps a problem and counts stochastic first-order oracle calls.
pub struct CountingProblem<'a, P: BilevelProblem + ?Sized> {
    inner: &'a P,
    calls: AtomicU64,
}

impl<'a, P: BilevelProblem + ?Sized> CountingProblem<'a, P> {
    pub fn new(inner: &'a P) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn inner(&self) -> &P {
        self.inner
    }

    fn bump(&self, k: usize) {
        self.calls.fetch_add(k as u64, Ordering::Relaxed);
    }
}

impl<P: BilevelProblem + ?Sized> BilevelProblem for CountingProblem<'_, P> {
    fn upper_dim(&self) -> usize {
        self.inner.upper_dim()
    }
    fn lower_dim(&self) -> usize {
        self.inner.lower_dim()
    }
    fn constraints(&self) -> &LinearConstraints {
        self.inner.constraints()
    }
    fn upper_set(&self) -> &UpperSet {
        self.inner.upper_set()
    }
    fn noise_sigma(&self) -> f64 {
        self.inner.noise_sigma()
    }
    fn curvature(&self) -> Curvature {
        self.inner.curvature()
    }
    fn f_value(&self, x: &DVector<f64>, y: &DVector<f64>, noise: Option<&mut NoiseStream>) -> f64 {
        self.inner.f_value(x, y, noise)
    }
    fn g_value(&self, x: &DVector<f64>, y: &DVector<f64>, noise: Option<&mut NoiseStream>) -> f64 {
        self.inner.g_value(x, y, noise)
    }
    fn grad_f(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        noise: Option<&mut NoiseStream>,
    ) -> GradPair {
        self.bump(1);
        self.inner.grad_f(x, y, noise)
    }
    fn grad_g(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        noise: Option<&mut NoiseStream>,
    ) -> GradPair {
        self.bump(1);
        self.inner.grad_g(x, y, noise)
    }
    fn grad_g_batch(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        count: usize,
        noise: &mut NoiseStream,
    ) -> GradPair {
        self.bump(count.max(1));
        self.inner.grad_g_batch(x, y, count, noise)
    }
    fn grad_f_batch(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        count: usize,
        noise: &mut NoiseStream,
    ) -> GradPair {
        self.bump(count.max(1));
        self.inner.grad_f_batch(x, y, count, noise)
    }
    fn hessians_yy(&self) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        self.inner.hessians_yy()
    }
}

/// JSON document describing a problem instance.
///
/// Matrices are stored row-major. For `instance_kind = "quadratic_box"` the
/// remaining data is regenerated from `seed` (or read from `quadratic` for
/// hand-built instances).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemDocument {
    pub n: usize,
    pub m: usize,
    #[serde(rename = "A")]
    pub a: Vec<f64>,
    #[serde(rename = "B")]
    pub b: Vec<f64>,
    #[serde(rename = "b")]
    pub rhs: Vec<f64>,
    pub upper_set: UpperSet,
    pub noise_sigma: f64,
    pub instance_kind: String,
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadratic: Option<crate::quadratic::QuadraticParts>,
}

impl ProblemDocument {
    pub fn constraints(&self) -> Result<LinearConstraints> {
        let p = self.rhs.len();
        if self.a.len() != p * self.n || self.b.len() != p * self.m {
            return Err(Error::DimensionMismatch(format!(
                "document has p = {p} but |A| = {} and |B| = {}",
                self.a.len(),
                self.b.len()
            )));
        }
        LinearConstraints::new(
            DMatrix::from_row_slice(p, self.n, &self.a),
            DMatrix::from_row_slice(p, self.m, &self.b),
            DVector::from_column_slice(&self.rhs),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub(crate) fn row_major(mat: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(mat.len());
    for i in 0..mat.nrows() {
        for j in 0..mat.ncols() {
            out.push(mat[(i, j)]);
        }
    }
    out
}
