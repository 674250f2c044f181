//! Synthetic quadratic bilevel family with box lower-level constraints.
//!
//! ```text
//! f(x, y) = ½ xᵀQ_u x + c_uᵀx + ½ yᵀP_y y + xᵀP y
//! g(x, y) = ½ yᵀQ_l y + c_lᵀy + xᵀJ y,     y ∈ [lo, hi]^m
//! ```
//!
//! `J` is the `n × m` rectangular identity, so for `n = m` the coupling is
//! `xᵀy`. `P` (`n × m`) is the cross term and `P_y` (`m × m`, symmetric) the
//! pure-`y` term of the upper level.
//!
//! Stochastic oracles perturb each quadratic term (`Q_u`, `P_y`, `Q_l`) by an
//! independent symmetric random matrix `E` scaled by `σ / (1 + ‖x‖)`. `E` is
//! drawn as `(a bᵀ + b aᵀ)/√2` with `a, b ~ N(0, I)`: off-diagonal entries have
//! variance 1 (diagonal 2), `E v` has covariance `‖v‖² I + v vᵀ`, and the
//! product costs `O(m)` instead of `O(m²)`. Because `E v` is linear in `v`,
//! replaying a stream at two points couples the samples, which the
//! variance-reduced penalty solver relies on.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{operator_norm, symmetric_extremes, symmetric_spectral_norm};
use crate::problem::{
    row_major, BilevelProblem, Curvature, GradPair, KktResidual, LinearConstraints,
    LowerLevelSolution, ProblemDocument, UpperSet,
};
use crate::rng::NoiseStream;

pub const INSTANCE_KIND: &str = "quadratic_box";

/// Raw coefficients of a quadratic instance, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticParts {
    pub n: usize,
    pub m: usize,
    pub q_u: Vec<f64>,
    pub q_l: Vec<f64>,
    pub p: Vec<f64>,
    pub p_y: Vec<f64>,
    pub c_u: Vec<f64>,
    pub c_l: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct QuadraticInstance {
    q_u: DMatrix<f64>,
    q_l: DMatrix<f64>,
    p: DMatrix<f64>,
    p_y: DMatrix<f64>,
    c_u: DVector<f64>,
    c_l: DVector<f64>,
    noise_sigma: f64,
    lo: f64,
    hi: f64,
    constraints: LinearConstraints,
    upper_set: UpperSet,
    curvature: Curvature,
    norm_q_u: f64,
    norm_p: f64,
    seed: Option<u64>,
}

/// Parameters of [`QuadraticInstance::exact_lower_solve`].
#[derive(Clone, Copy, Debug)]
pub struct ExactSolveOptions {
    pub max_rounds: usize,
    pub pg_steps: usize,
}

impl Default for ExactSolveOptions {
    fn default() -> Self {
        Self {
            max_rounds: 60,
            pg_steps: 500,
        }
    }
}

fn symmetric_gaussian(rng: &mut NoiseStream, k: usize, scale: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(k, k, |_, _| rng.normal() * scale);
    (&m + m.transpose()) * 0.5
}

fn shift_to_unit_floor(mut q: DMatrix<f64>) -> DMatrix<f64> {
    let (lo, _) = symmetric_extremes(&q);
    let shift = lo.abs() + 1.0;
    for i in 0..q.nrows() {
        q[(i, i)] += shift;
    }
    q
}

impl QuadraticInstance {
    /// Draws an instance with i.i.d. `N(0, 1)/√dim` coefficients.
    ///
    /// `Q_u`, `Q_l` and `P_y` are symmetrized as `(M + Mᵀ)/2`; `Q_l` and `Q_u`
    /// are shifted by `(|λ_min| + 1) I`, so both have smallest eigenvalue at
    /// least one. Lower-level constraints are the box `[−1, 1]^m`.
    pub fn generate(n: usize, m: usize, seed: u64, noise_sigma: f64) -> Self {
        assert!(n >= 1 && m >= 1, "dimensions must be positive");
        let mut rng = NoiseStream::new(seed);
        let sn = 1.0 / (n as f64).sqrt();
        let sm = 1.0 / (m as f64).sqrt();
        let sp = 1.0 / (n.max(m) as f64).sqrt();
        let q_u = shift_to_unit_floor(symmetric_gaussian(&mut rng, n, sn));
        let q_l = shift_to_unit_floor(symmetric_gaussian(&mut rng, m, sm));
        let p_y = symmetric_gaussian(&mut rng, m, sm);
        let p = DMatrix::from_fn(n, m, |_, _| rng.normal() * sp);
        let c_u = rng.normal_vector(n) * sn;
        let c_l = rng.normal_vector(m) * sm;
        let mut inst = Self::assemble(q_u, q_l, p, p_y, c_u, c_l, noise_sigma)
            .expect("generated instance satisfies its invariants");
        inst.seed = Some(seed);
        inst
    }

    /// Builds an instance from explicit coefficients.
    pub fn from_parts(parts: &QuadraticParts, noise_sigma: f64) -> Result<Self> {
        let (n, m) = (parts.n, parts.m);
        let check = |name: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(Error::DimensionMismatch(format!(
                    "{name} has {got} entries, expected {want}"
                )))
            }
        };
        check("q_u", parts.q_u.len(), n * n)?;
        check("q_l", parts.q_l.len(), m * m)?;
        check("p", parts.p.len(), n * m)?;
        check("p_y", parts.p_y.len(), m * m)?;
        check("c_u", parts.c_u.len(), n)?;
        check("c_l", parts.c_l.len(), m)?;
        Self::assemble(
            DMatrix::from_row_slice(n, n, &parts.q_u),
            DMatrix::from_row_slice(m, m, &parts.q_l),
            DMatrix::from_row_slice(n, m, &parts.p),
            DMatrix::from_row_slice(m, m, &parts.p_y),
            DVector::from_column_slice(&parts.c_u),
            DVector::from_column_slice(&parts.c_l),
            noise_sigma,
        )
    }

    fn assemble(
        q_u: DMatrix<f64>,
        q_l: DMatrix<f64>,
        p: DMatrix<f64>,
        p_y: DMatrix<f64>,
        c_u: DVector<f64>,
        c_l: DVector<f64>,
        noise_sigma: f64,
    ) -> Result<Self> {
        if !(noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("noise_sigma must be nonnegative".into()));
        }
        for (name, q) in [("Q_u", &q_u), ("Q_l", &q_l), ("P_y", &p_y)] {
            let asym = (q - q.transpose()).amax();
            if asym > 1e-12 * (1.0 + q.amax()) {
                return Err(Error::InvalidConfig(format!("{name} is not symmetric")));
            }
        }
        let (mu_g, c_g) = symmetric_extremes(&q_l);
        if !(mu_g > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "Q_l must be positive definite (smallest eigenvalue {mu_g:.3e})"
            )));
        }
        let (n, m) = (q_u.nrows(), q_l.nrows());
        let curvature = Curvature {
            mu_g,
            c_g,
            c_f: symmetric_spectral_norm(&p_y),
        };
        Ok(Self {
            norm_q_u: symmetric_spectral_norm(&q_u),
            norm_p: operator_norm(&p),
            q_u,
            q_l,
            p,
            p_y,
            c_u,
            c_l,
            noise_sigma,
            lo: -1.0,
            hi: 1.0,
            constraints: LinearConstraints::lower_box(n, m, -1.0, 1.0),
            upper_set: UpperSet::Free,
            curvature,
            seed: None,
        })
    }

    pub fn with_upper_set(mut self, set: UpperSet) -> Self {
        self.upper_set = set;
        self
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn q_u(&self) -> &DMatrix<f64> {
        &self.q_u
    }
    pub fn q_l(&self) -> &DMatrix<f64> {
        &self.q_l
    }
    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }
    pub fn p_y(&self) -> &DMatrix<f64> {
        &self.p_y
    }
    pub fn c_u(&self) -> &DVector<f64> {
        &self.c_u
    }
    pub fn c_l(&self) -> &DVector<f64> {
        &self.c_l
    }
    pub fn mu_g(&self) -> f64 {
        self.curvature.mu_g
    }
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }
    pub fn bounds(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn parts(&self) -> QuadraticParts {
        QuadraticParts {
            n: self.q_u.nrows(),
            m: self.q_l.nrows(),
            q_u: row_major(&self.q_u),
            q_l: row_major(&self.q_l),
            p: row_major(&self.p),
            p_y: row_major(&self.p_y),
            c_u: self.c_u.iter().cloned().collect(),
            c_l: self.c_l.iter().cloned().collect(),
        }
    }

    /// `J y`: the first `min(n, m)` coordinates of `y`, zero-padded to `n`.
    fn couple_to_x(&self, y: &DVector<f64>) -> DVector<f64> {
        let n = self.q_u.nrows();
        DVector::from_fn(n, |i, _| if i < y.len() { y[i] } else { 0.0 })
    }

    /// `Jᵀ x`.
    fn couple_to_y(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = self.q_l.nrows();
        DVector::from_fn(m, |i, _| if i < x.len() { x[i] } else { 0.0 })
    }

    fn noise_scale(&self, x: &DVector<f64>) -> f64 {
        self.noise_sigma / (1.0 + x.norm())
    }

    /// Returns `E v` for a fresh symmetric perturbation `E`.
    fn perturb(v: &DVector<f64>, rng: &mut NoiseStream) -> DVector<f64> {
        let a = rng.normal_vector(v.len());
        let b = rng.normal_vector(v.len());
        (&a * b.dot(v) + &b * a.dot(v)) * std::f64::consts::FRAC_1_SQRT_2
    }

    /// Returns `vᵀ E v` for a fresh symmetric perturbation `E`.
    fn perturb_form(v: &DVector<f64>, rng: &mut NoiseStream) -> f64 {
        let a = rng.normal_vector(v.len());
        let b = rng.normal_vector(v.len());
        std::f64::consts::SQRT_2 * a.dot(v) * b.dot(v)
    }

    fn exact_grad_f(&self, x: &DVector<f64>, y: &DVector<f64>) -> GradPair {
        GradPair {
            x: &self.q_u * x + &self.c_u + &self.p * y,
            y: &self.p_y * y + self.p.tr_mul(x),
        }
    }

    fn exact_grad_g(&self, x: &DVector<f64>, y: &DVector<f64>) -> GradPair {
        GradPair {
            x: self.couple_to_x(y),
            y: &self.q_l * y + &self.c_l + self.couple_to_y(x),
        }
    }

    fn h_and_lambda_for_box(&self, y: &DVector<f64>, grad: &DVector<f64>, active: &[Bound])
        -> (DVector<f64>, DVector<f64>) {
        let m = y.len();
        let h = self.constraints.values_unchecked(&DVector::zeros(self.q_u.nrows()), y);
        let mut lambda = DVector::zeros(2 * m);
        for i in 0..m {
            match active[i] {
                Bound::Upper => lambda[i] = (-grad[i]).max(0.0),
                Bound::Lower => lambda[m + i] = grad[i].max(0.0),
                Bound::Free => {}
            }
        }
        (h, lambda)
    }

    /// Solves `min_y g(x, y)` over the box to KKT residual `≤ tol`.
    ///
    /// Projected gradient with step `1/λ_max(Q_l)` identifies the active set;
    /// each round then solves the equality-constrained system on the free
    /// coordinates and recovers multipliers from stationarity.
    pub fn exact_lower_solve(&self, x: &DVector<f64>, tol: f64) -> Result<LowerLevelSolution> {
        self.exact_lower_solve_with(x, tol, ExactSolveOptions::default())
    }

    pub fn exact_lower_solve_with(
        &self,
        x: &DVector<f64>,
        tol: f64,
        opts: ExactSolveOptions,
    ) -> Result<LowerLevelSolution> {
        if !(tol > 0.0) {
            return Err(Error::InvalidConfig("tolerance must be positive".into()));
        }
        if x.len() != self.q_u.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "x has {} entries, expected {}",
                x.len(),
                self.q_u.nrows()
            )));
        }
        let m = self.q_l.nrows();
        let q = &self.c_l + self.couple_to_y(x);
        let step = 1.0 / self.curvature.c_g;
        let (lo, hi) = (self.lo, self.hi);
        let mut y = DVector::zeros(m);
        let mut best = f64::INFINITY;
        let mut iterations = 0;

        for _round in 0..opts.max_rounds {
            for _ in 0..opts.pg_steps {
                let grad = &self.q_l * &y + &q;
                let next = (&y - grad * step).map(|v| v.clamp(lo, hi));
                let moved = (&next - &y).amax();
                y = next;
                iterations += 1;
                if moved <= 1e-15 * (1.0 + y.amax()) {
                    break;
                }
            }
            let grad = &self.q_l * &y + &q;
            let bound_tol = 1e-9 * (hi - lo);
            let active: Vec<Bound> = (0..m)
                .map(|i| {
                    if y[i] <= lo + bound_tol && grad[i] > 0.0 {
                        Bound::Lower
                    } else if y[i] >= hi - bound_tol && grad[i] < 0.0 {
                        Bound::Upper
                    } else {
                        Bound::Free
                    }
                })
                .collect();
            let polished = self.polish(&y, &q, &active);
            for candidate in polished.iter().chain(std::iter::once(&y)) {
                let g = &self.q_l * candidate + &q;
                let act: Vec<Bound> = (0..m)
                    .map(|i| match active[i] {
                        Bound::Lower if candidate[i] == lo => Bound::Lower,
                        Bound::Upper if candidate[i] == hi => Bound::Upper,
                        _ => Bound::Free,
                    })
                    .collect();
                let (h, lambda) = self.h_and_lambda_for_box(candidate, &g, &act);
                let res = KktResidual::compute(&self.constraints, &g, &h, &lambda).max();
                best = best.min(res);
                if res <= tol {
                    return Ok(LowerLevelSolution {
                        y: candidate.clone(),
                        lambda,
                        kkt_residual: res,
                        iterations,
                    });
                }
            }
            if let Some(p) = polished {
                y = p.map(|v| v.clamp(lo, hi));
            }
        }
        Err(Error::NonConvergence {
            best_residual: best,
        })
    }

    /// Equality-constrained solve on the free coordinates; `None` if the
    /// result leaves the box.
    fn polish(&self, y: &DVector<f64>, q: &DVector<f64>, active: &[Bound]) -> Option<DVector<f64>> {
        let m = y.len();
        let free: Vec<usize> = (0..m).filter(|&i| active[i] == Bound::Free).collect();
        let mut out = y.clone();
        for i in 0..m {
            match active[i] {
                Bound::Lower => out[i] = self.lo,
                Bound::Upper => out[i] = self.hi,
                Bound::Free => {}
            }
        }
        if free.is_empty() {
            return Some(out);
        }
        let q_ff = self.q_l.select_rows(free.iter()).select_columns(free.iter());
        let rhs = DVector::from_fn(free.len(), |k, _| {
            let i = free[k];
            let mut r = -q[i];
            for j in 0..m {
                if active[j] != Bound::Free {
                    r -= self.q_l[(i, j)] * out[j];
                }
            }
            r
        });
        let sol = q_ff.cholesky()?.solve(&rhs);
        let slack = 1e-12 * (self.hi - self.lo);
        for (k, &i) in free.iter().enumerate() {
            if sol[k] < self.lo - slack || sol[k] > self.hi + slack {
                return None;
            }
            out[i] = sol[k].clamp(self.lo, self.hi);
        }
        Some(out)
    }

    /// `F(x) = f(x, y*(x))` with the noiseless objective.
    pub fn f_true(&self, x: &DVector<f64>, tol: f64) -> Result<f64> {
        let sol = self.exact_lower_solve(x, tol)?;
        Ok(self.f_value(x, &sol.y, None))
    }

    /// `∇F(x)` by differentiating the KKT system on the active set at `y*(x)`.
    pub fn exact_hypergradient(&self, x: &DVector<f64>, tol: f64) -> Result<DVector<f64>> {
        let sol = self.exact_lower_solve(x, tol)?;
        let gf = self.exact_grad_f(x, &sol.y);
        self.implicit_gradient(x, &sol.y, &sol.lambda, &gf, tol)
    }

    /// Implicit-function hypergradient at a given primal–dual pair.
    ///
    /// Rows are classified by their multiplier: `λ_i > tol` is active,
    /// otherwise inactive. A row with both `|h_i| < tol` and `λ_i < tol` is
    /// weakly active and reported as [`Error::DegenerateActiveSet`] when
    /// `strict` is set; otherwise it is treated as inactive.
    ///
    /// Forms `dy*/dx` explicitly (an `m_free × n` solve), as a Hessian-based
    /// method would.
    pub fn implicit_gradient_at(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        lambda: &DVector<f64>,
        grad_f: &GradPair,
        tol: f64,
        strict: bool,
    ) -> Result<DVector<f64>> {
        let m = y.len();
        let n = x.len();
        let h = self.constraints.values_unchecked(x, y);
        let mut clamped = vec![false; m];
        for row in 0..2 * m {
            let i = row % m;
            if lambda[row] > tol {
                clamped[i] = true;
            } else if strict && h[row].abs() < tol {
                return Err(Error::DegenerateActiveSet {
                    row,
                    h: h[row],
                    lambda: lambda[row],
                });
            }
        }
        let free: Vec<usize> = (0..m).filter(|&i| !clamped[i]).collect();
        let mut grad = grad_f.x.clone();
        if free.is_empty() {
            return Ok(grad);
        }
        let q_ff = self.q_l.select_rows(free.iter()).select_columns(free.iter());
        // ∂²g/∂y∂x = Jᵀ restricted to free rows.
        let cross = DMatrix::from_fn(free.len(), n, |k, j| if free[k] == j { 1.0 } else { 0.0 });
        let lu = q_ff.lu();
        let dy_dx = lu
            .solve(&(-cross))
            .ok_or_else(|| Error::InvalidConfig("singular free block of Q_l".into()))?;
        let gy_free = DVector::from_fn(free.len(), |k, _| grad_f.y[free[k]]);
        grad += dy_dx.tr_mul(&gy_free);
        Ok(grad)
    }

    fn implicit_gradient(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        lambda: &DVector<f64>,
        grad_f: &GradPair,
        tol: f64,
    ) -> Result<DVector<f64>> {
        self.implicit_gradient_at(x, y, lambda, grad_f, tol, true)
    }

    /// Bound on `‖∇F‖` over the ball of radius `radius` around the origin,
    /// from `‖Q_u‖`, `‖P‖`, `‖P_y‖` and `L_y = ‖J‖/μ_g`.
    pub fn lipschitz_estimate(&self, radius: f64) -> f64 {
        let m = self.q_l.nrows() as f64;
        let y_max = m.sqrt() * self.lo.abs().max(self.hi.abs());
        let l_y = 1.0 / self.curvature.mu_g;
        self.norm_q_u * radius
            + self.c_u.norm()
            + self.norm_p * y_max
            + l_y * (self.curvature.c_f * y_max + self.norm_p * radius)
    }

    /// Lipschitz constant of `y*(x)` implied by the free-block inverse.
    pub fn solution_lipschitz(&self) -> f64 {
        1.0 / self.curvature.mu_g
    }

    /// Hex SHA-256 over the coefficient bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for mat in [&self.q_u, &self.q_l, &self.p, &self.p_y] {
            h.update((mat.nrows() as u64).to_le_bytes());
            h.update((mat.ncols() as u64).to_le_bytes());
            for v in mat.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        for v in self.c_u.iter().chain(self.c_l.iter()) {
            h.update(v.to_bits().to_le_bytes());
        }
        h.update(self.noise_sigma.to_bits().to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_document(&self) -> ProblemDocument {
        ProblemDocument {
            n: self.q_u.nrows(),
            m: self.q_l.nrows(),
            a: row_major(self.constraints.a()),
            b: row_major(self.constraints.b()),
            rhs: self.constraints.rhs().iter().cloned().collect(),
            upper_set: self.upper_set.clone(),
            noise_sigma: self.noise_sigma,
            instance_kind: INSTANCE_KIND.to_string(),
            seed: self.seed,
            quadratic: if self.seed.is_some() {
                None
            } else {
                Some(self.parts())
            },
        }
    }

    /// Rebuilds an instance from its document; the stored constraints must
    /// match the box encoding.
    pub fn from_document(doc: &ProblemDocument) -> Result<Self> {
        if doc.instance_kind != INSTANCE_KIND {
            return Err(Error::Schema(format!(
                "instance_kind {:?} is not {INSTANCE_KIND:?}",
                doc.instance_kind
            )));
        }
        let inst = match (&doc.quadratic, doc.seed) {
            (Some(parts), _) => {
                let mut i = Self::from_parts(parts, doc.noise_sigma)?;
                i.seed = doc.seed;
                i
            }
            (None, Some(seed)) => Self::generate(doc.n, doc.m, seed, doc.noise_sigma),
            (None, None) => {
                return Err(Error::Schema(
                    "quadratic_box document needs a seed or explicit coefficients".into(),
                ))
            }
        };
        if inst.q_u.nrows() != doc.n || inst.q_l.nrows() != doc.m {
            return Err(Error::DimensionMismatch("document dimensions".into()));
        }
        let stored = doc.constraints()?;
        let same = stored.a() == inst.constraints.a()
            && stored.b() == inst.constraints.b()
            && stored.rhs() == inst.constraints.rhs();
        if !same {
            return Err(Error::Schema(
                "constraint data does not match the [-1, 1] box encoding".into(),
            ));
        }
        Ok(inst.with_upper_set(doc.upper_set.clone()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bound {
    Free,
    Lower,
    Upper,
}

impl BilevelProblem for QuadraticInstance {
    fn upper_dim(&self) -> usize {
        self.q_u.nrows()
    }
    fn lower_dim(&self) -> usize {
        self.q_l.nrows()
    }
    fn constraints(&self) -> &LinearConstraints {
        &self.constraints
    }
    fn upper_set(&self) -> &UpperSet {
        &self.upper_set
    }
    fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }
    fn curvature(&self) -> Curvature {
        self.curvature
    }

    fn f_value(&self, x: &DVector<f64>, y: &DVector<f64>, noise: Option<&mut NoiseStream>) -> f64 {
        let mut v = 0.5 * x.dot(&(&self.q_u * x))
            + self.c_u.dot(x)
            + 0.5 * y.dot(&(&self.p_y * y))
            + x.dot(&(&self.p * y));
        if let (Some(rng), true) = (noise, self.noise_sigma > 0.0) {
            let s = self.noise_scale(x);
            v += 0.5 * s * Self::perturb_form(x, rng);
            v += 0.5 * s * Self::perturb_form(y, rng);
        }
        v
    }

    fn g_value(&self, x: &DVector<f64>, y: &DVector<f64>, noise: Option<&mut NoiseStream>) -> f64 {
        let mut v =
            0.5 * y.dot(&(&self.q_l * y)) + self.c_l.dot(y) + self.couple_to_y(x).dot(y);
        if let (Some(rng), true) = (noise, self.noise_sigma > 0.0) {
            v += 0.5 * self.noise_scale(x) * Self::perturb_form(y, rng);
        }
        v
    }

    fn grad_f(&self, x: &DVector<f64>, y: &DVector<f64>, noise: Option<&mut NoiseStream>) -> GradPair {
        let mut g = self.exact_grad_f(x, y);
        if let (Some(rng), true) = (noise, self.noise_sigma > 0.0) {
            let s = self.noise_scale(x);
            g.x += Self::perturb(x, rng) * s;
            g.y += Self::perturb(y, rng) * s;
        }
        g
    }

    fn grad_g(&self, x: &DVector<f64>, y: &DVector<f64>, noise: Option<&mut NoiseStream>) -> GradPair {
        let mut g = self.exact_grad_g(x, y);
        if let (Some(rng), true) = (noise, self.noise_sigma > 0.0) {
            g.y += Self::perturb(y, rng) * self.noise_scale(x);
        }
        g
    }

    fn grad_g_batch(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        count: usize,
        noise: &mut NoiseStream,
    ) -> GradPair {
        let count = count.max(1);
        let mut g = self.exact_grad_g(x, y);
        if self.noise_sigma > 0.0 {
            let mut acc = DVector::zeros(y.len());
            for _ in 0..count {
                acc += Self::perturb(y, noise);
            }
            g.y += acc * (self.noise_scale(x) / count as f64);
        }
        g
    }

    fn grad_f_batch(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        count: usize,
        noise: &mut NoiseStream,
    ) -> GradPair {
        let count = count.max(1);
        let mut g = self.exact_grad_f(x, y);
        if self.noise_sigma > 0.0 {
            let mut ax = DVector::zeros(x.len());
            let mut ay = DVector::zeros(y.len());
            for _ in 0..count {
                ax += Self::perturb(x, noise);
                ay += Self::perturb(y, noise);
            }
            let s = self.noise_scale(x) / count as f64;
            g.x += ax * s;
            g.y += ay * s;
        }
        g
    }

    fn hessians_yy(&self) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        Some((self.p_y.clone(), self.q_l.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn scalar_instance(q_l: f64, c_l: f64) -> QuadraticInstance {
        QuadraticInstance::from_parts(
            &QuadraticParts {
                n: 1,
                m: 1,
                q_u: vec![1.0],
                q_l: vec![q_l],
                p: vec![1.0],
                p_y: vec![1.0],
                c_u: vec![1.0],
                c_l: vec![c_l],
            },
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let a = QuadraticInstance::generate(4, 3, 9, 0.01);
        let b = QuadraticInstance::generate(4, 3, 9, 0.01);
        assert_eq!(a.parts(), b.parts());
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), QuadraticInstance::generate(4, 3, 10, 0.01).fingerprint());
    }

    #[test]
    fn generated_constraints_are_box_rows() {
        let inst = QuadraticInstance::generate(3, 4, 0, 0.0);
        assert_eq!(inst.constraints().rows(), 8);
        assert!(inst.mu_g() >= 1.0 - 1e-12);
    }

    #[test]
    fn interior_scalar_solution() {
        let inst = scalar_instance(1.0, 0.5);
        let sol = inst.exact_lower_solve(&DVector::zeros(1), 1e-12).unwrap();
        assert_relative_eq!(sol.y[0], -0.5, epsilon = 1e-12);
        assert!(sol.lambda.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn clamped_scalar_solution() {
        let inst = scalar_instance(1.0, 2.0);
        let sol = inst.exact_lower_solve(&DVector::zeros(1), 1e-12).unwrap();
        assert_eq!(sol.y[0], -1.0);
        // Row 1 is the lower bound −y − 1 ≤ 0.
        assert_relative_eq!(sol.lambda[1], 1.0, epsilon = 1e-12);
        assert_eq!(sol.lambda[0], 0.0);
    }

    #[test]
    fn nonpositive_tolerance_rejected() {
        let inst = scalar_instance(1.0, 0.0);
        assert!(inst.exact_lower_solve(&DVector::zeros(1), 0.0).is_err());
    }

    #[test]
    fn zero_noise_oracles_are_exact() {
        let inst = QuadraticInstance::generate(3, 3, 1, 0.0);
        let x = DVector::from_vec(vec![0.1, -0.2, 0.3]);
        let y = DVector::from_vec(vec![0.5, 0.0, -0.5]);
        let mut s = NoiseStream::new(0);
        assert_eq!(inst.grad_f(&x, &y, Some(&mut s)), inst.grad_f(&x, &y, None));
        assert_eq!(inst.grad_g(&x, &y, Some(&mut s)), inst.grad_g(&x, &y, None));
    }

    #[test]
    fn batch_matches_sequential_average() {
        let inst = QuadraticInstance::generate(3, 3, 2, 0.05);
        let x = DVector::from_vec(vec![0.4, -0.2, 0.1]);
        let y = DVector::from_vec(vec![0.3, 0.9, -0.5]);
        let mut s1 = NoiseStream::new(5);
        let mut s2 = NoiseStream::new(5);
        let batch = inst.grad_g_batch(&x, &y, 8, &mut s1);
        let mut acc = DVector::zeros(3);
        for _ in 0..8 {
            acc += inst.grad_g(&x, &y, Some(&mut s2)).y;
        }
        assert_relative_eq!(batch.y, acc / 8.0, epsilon = 1e-13);
    }

    #[test]
    fn fully_clamped_hypergradient_is_partial_x() {
        let inst = scalar_instance(1.0, 2.0);
        let x = DVector::zeros(1);
        let g = inst.exact_hypergradient(&x, 1e-12).unwrap();
        let direct = inst.grad_f(&x, &DVector::from_element(1, -1.0), None).x;
        assert_relative_eq!(g, direct, epsilon = 1e-12);
    }

    #[test]
    fn document_round_trip_by_seed() {
        let inst = QuadraticInstance::generate(2, 3, 4, 0.01);
        let doc = inst.to_document();
        assert_eq!(doc.rhs.len(), 6);
        let back = QuadraticInstance::from_document(&ProblemDocument::from_json(&doc.to_json().unwrap()).unwrap()).unwrap();
        assert_eq!(back.fingerprint(), inst.fingerprint());
    }

    #[test]
    fn document_with_wrong_constraints_rejected() {
        let inst = QuadraticInstance::generate(2, 2, 4, 0.0);
        let mut doc = inst.to_document();
        doc.rhs[0] = 2.0;
        assert!(matches!(QuadraticInstance::from_document(&doc), Err(Error::Schema(_))));
    }
}
