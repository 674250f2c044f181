//! Stochastic primal–dual (SPD) solver for the constrained lower level.
//!
//! ```text
//! y ← y − η_y (∇_y g̃(x, y) − Bᵀλ)
//! λ ← max(0, λ + η_λ (A x − B y − b))
//! ```
//!
//! The dual update uses the freshly updated `y`. Noiseless runs stop on the
//! KKT residual; noisy runs use the full iteration budget and average the
//! final quarter of the iterates.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{nnls, numerical_rank};
use crate::problem::{BilevelProblem, KktResidual, LowerLevelSolution};
use crate::rng::NoiseStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    LastIterate,
    /// Mean of the final 25% of iterates.
    TailAverage,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpdConfig {
    pub eta_y: f64,
    pub eta_lambda: f64,
    /// Target KKT residual.
    pub tol: f64,
    pub max_iters: usize,
    pub averaging: Averaging,
    /// Gradient samples averaged per primal step when the problem is noisy.
    pub batch: usize,
    /// Samples used to evaluate the reported residual of a noisy run.
    pub residual_batch: usize,
}

impl SpdConfig {
    /// `η_y = 1/(2 C_g)`, `η_λ = μ_g / (2‖B‖²)`; tail averaging when noisy.
    pub fn for_problem<P: BilevelProblem + ?Sized>(problem: &P, tol: f64) -> Self {
        let curv = problem.curvature();
        let nb = problem.constraints().norm_b();
        let eta_lambda = if nb > 0.0 {
            curv.mu_g / (2.0 * nb * nb)
        } else {
            1.0
        };
        let noisy = !problem.is_deterministic();
        Self {
            eta_y: 1.0 / (2.0 * curv.c_g),
            eta_lambda,
            tol,
            max_iters: if noisy { 2_000 } else { 200_000 },
            averaging: if noisy {
                Averaging::TailAverage
            } else {
                Averaging::LastIterate
            },
            batch: 1,
            residual_batch: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_y > 0.0 && self.eta_lambda > 0.0) {
            return Err(Error::InvalidConfig("SPD steps must be positive".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig("SPD tolerance must be positive".into()));
        }
        if self.max_iters == 0 || self.batch == 0 || self.residual_batch == 0 {
            return Err(Error::InvalidConfig(
                "SPD iteration and batch counts must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-iteration debugging row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpdLogRow {
    pub iter: usize,
    pub residual: f64,
    pub norm_y: f64,
    pub norm_lambda: f64,
}

/// Runs SPD from `y = 0`, `λ = 0`.
///
/// Noiseless problems return as soon as the KKT residual reaches `cfg.tol`
/// and otherwise return the best iterate seen. Noisy problems run
/// `cfg.max_iters` steps and report the residual of the returned point from a
/// `cfg.residual_batch`-sample gradient average.
pub fn spd_solve<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &DVector<f64>,
    cfg: &SpdConfig,
    stream: &mut NoiseStream,
    mut log: Option<&mut Vec<SpdLogRow>>,
) -> Result<LowerLevelSolution> {
    cfg.validate()?;
    let c = problem.constraints();
    if x.len() != c.upper_dim() {
        return Err(Error::DimensionMismatch(format!(
            "x has {} entries, expected {}",
            x.len(),
            c.upper_dim()
        )));
    }
    let m = problem.lower_dim();
    let p = c.rows();
    let ax_minus_b = c.a_mul(x) - c.rhs();
    let h_at = |y: &DVector<f64>| &ax_minus_b - c.b_mul(y);

    let mut y = DVector::zeros(m);
    let mut lambda = DVector::zeros(p);

    if problem.is_deterministic() {
        let mut grad = problem.grad_g(x, &y, None).y;
        let residual = |grad: &DVector<f64>, y: &DVector<f64>, lambda: &DVector<f64>| {
            KktResidual::compute(c, grad, &h_at(y), lambda).max()
        };
        let initial = residual(&grad, &y, &lambda);
        let mut best = (initial, y.clone(), lambda.clone());
        if initial <= cfg.tol {
            return Ok(LowerLevelSolution {
                y,
                lambda,
                kkt_residual: initial,
                iterations: 0,
            });
        }
        for iter in 1..=cfg.max_iters {
            y -= (&grad - c.b_tr_mul(&lambda)) * cfg.eta_y;
            lambda = (&lambda + h_at(&y) * cfg.eta_lambda).map(|v| v.max(0.0));
            grad = problem.grad_g(x, &y, None).y;
            let r = residual(&grad, &y, &lambda);
            if let Some(rows) = log.as_deref_mut() {
                rows.push(SpdLogRow {
                    iter,
                    residual: r,
                    norm_y: y.norm(),
                    norm_lambda: lambda.norm(),
                });
            }
            if !r.is_finite() || (initial > 0.0 && r > 10.0 * initial) {
                return Err(Error::SpdDivergence {
                    residual: r,
                    initial,
                });
            }
            if r < best.0 {
                best = (r, y.clone(), lambda.clone());
            }
            if r <= cfg.tol {
                return Ok(LowerLevelSolution {
                    y,
                    lambda,
                    kkt_residual: r,
                    iterations: iter,
                });
            }
        }
        let (r, y, lambda) = best;
        return Ok(LowerLevelSolution {
            y,
            lambda,
            kkt_residual: r,
            iterations: cfg.max_iters,
        });
    }

    let tail_start = match cfg.averaging {
        Averaging::LastIterate => cfg.max_iters,
        Averaging::TailAverage => cfg.max_iters - cfg.max_iters.div_ceil(4),
    };
    let mut y_sum = DVector::zeros(m);
    let mut lambda_sum = DVector::zeros(p);
    let mut tail = 0usize;
    let mut initial = None;
    for iter in 1..=cfg.max_iters {
        let grad = problem.grad_g_batch(x, &y, cfg.batch, stream).y;
        let stationarity = &grad - c.b_tr_mul(&lambda);
        let h = h_at(&y);
        let r = KktResidual::compute(c, &grad, &h, &lambda).max();
        let r0 = *initial.get_or_insert(r);
        if let Some(rows) = log.as_deref_mut() {
            rows.push(SpdLogRow {
                iter: iter - 1,
                residual: r,
                norm_y: y.norm(),
                norm_lambda: lambda.norm(),
            });
        }
        if !r.is_finite() || (r0 > 0.0 && r > 10.0 * r0) {
            return Err(Error::SpdDivergence {
                residual: r,
                initial: r0,
            });
        }
        y -= stationarity * cfg.eta_y;
        lambda = (&lambda + h_at(&y) * cfg.eta_lambda).map(|v| v.max(0.0));
        if iter > tail_start {
            y_sum += &y;
            lambda_sum += &lambda;
            tail += 1;
        }
    }
    if tail > 0 {
        y = y_sum / tail as f64;
        lambda = lambda_sum / tail as f64;
    }
    let grad = problem.grad_g_batch(x, &y, cfg.residual_batch, stream).y;
    let r = KktResidual::compute(c, &grad, &h_at(&y), &lambda).max();
    Ok(LowerLevelSolution {
        y,
        lambda,
        kkt_residual: r,
        iterations: cfg.max_iters,
    })
}

/// Nonnegative least-squares fit of `∇_y g(x, y) = Bᵀλ` on the rows with
/// `h_i ≥ −active_tol`; other multipliers are zero.
pub fn estimate_duals_from_primal<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &DVector<f64>,
    y: &DVector<f64>,
    active_tol: f64,
) -> Result<DVector<f64>> {
    let c = problem.constraints();
    let h = c.values(x, y)?;
    let support: Vec<usize> = (0..c.rows()).filter(|&i| h[i] >= -active_tol).collect();
    let mut lambda = DVector::zeros(c.rows());
    if support.is_empty() {
        return Ok(lambda);
    }
    let b_s = c.b().select_rows(support.iter());
    let rank = numerical_rank(&b_s, 1e-10);
    if rank < support.len() {
        return Err(Error::LicqViolation {
            rows: support.len(),
            rank,
        });
    }
    let grad = problem.grad_g(x, y, None).y;
    let fit = nnls(&b_s.transpose(), &grad);
    for (k, &i) in support.iter().enumerate() {
        lambda[i] = fit[k];
    }
    Ok(lambda)
}
