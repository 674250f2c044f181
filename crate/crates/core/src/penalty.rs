//! Smoothed penalty Lagrangian and the stochastic hypergradient oracle.
//!
//! Given an approximate lower-level pair `(ỹ*, λ̃)` at `x`, the oracle
//! minimizes
//!
//! ```text
//! L(x, y) = f(x, y) + α₁ (g(x, y) + λ̃ᵀh(x, y) − g(x, ỹ*)) + (α₂/2) Σ ρ_i h_i(x, y)²
//! ```
//!
//! over `y` and returns the average of `N_g` samples of `∇_x L` at the
//! minimizer, with `α₁ = α⁻²`, `α₂ = α⁻⁴`. The weights
//! `ρ_i = σ_h(h_i(x, ỹ*)) σ_λ(λ̃_i)` are fixed before the minimization.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::symmetric_extremes;
use crate::lower_level::{spd_solve, SpdConfig};
use crate::problem::{BilevelProblem, LowerLevelSolution};
use crate::rng::NoiseStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub alpha: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub delta: f64,
    /// `τ = tau_scale · δ`; the `σ_h` ramp has width `τδ`.
    pub tau_scale: f64,
    pub eps_lambda: f64,
    pub n_g: usize,
    /// Lower-level KKT residual target as a multiple of `τδ`.
    pub ll_tol_scale: f64,
    /// Penalty stopping rule `‖∇_y L‖ ≤ pen_tol_scale · μ_pen · δ`.
    pub pen_tol_scale: f64,
    /// SPD budget when the problem is noisy; `0` picks
    /// `⌈4 κ_g ln(1/δ)⌉` with `κ_g = C_g/μ_g`.
    pub ll_max_iters: usize,
    pub ll_batch: usize,
    /// Gradient-descent cap when the problem is noiseless.
    pub pen_max_iters: usize,
    pub svrg_epochs: usize,
    /// Inner steps per epoch; `0` picks `⌈2 L_pen/μ_pen⌉`.
    pub svrg_inner: usize,
    pub svrg_batch0: usize,
    pub svrg_batch_max: usize,
}

impl PenaltyConfig {
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha,
            alpha1: 1.0 / (alpha * alpha),
            alpha2: 1.0 / (alpha * alpha * alpha * alpha),
            delta: alpha * alpha * alpha,
            tau_scale: 1.0,
            eps_lambda: 1e-3,
            n_g: 1,
            ll_tol_scale: 0.01,
            pen_tol_scale: 1.0,
            ll_max_iters: 0,
            ll_batch: 1,
            pen_max_iters: 200_000,
            svrg_epochs: 8,
            svrg_inner: 0,
            svrg_batch0: 16,
            svrg_batch_max: 4096,
        }
    }

    /// Same settings with `α` (and the quantities derived from it) replaced.
    pub fn with_alpha(&self, alpha: f64) -> Self {
        let fresh = Self::new(alpha);
        Self {
            alpha,
            alpha1: fresh.alpha1,
            alpha2: fresh.alpha2,
            delta: fresh.delta,
            ..self.clone()
        }
    }

    pub fn with_n_g(mut self, n_g: usize) -> Self {
        self.n_g = n_g;
        self
    }

    pub fn tau(&self) -> f64 {
        self.tau_scale * self.delta
    }

    /// Width of the `σ_h` ramp.
    pub fn tau_delta(&self) -> f64 {
        self.tau() * self.delta
    }

    pub fn ll_tol(&self) -> f64 {
        self.ll_tol_scale * self.tau_delta()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha", self.alpha),
            ("tau_scale", self.tau_scale),
            ("eps_lambda", self.eps_lambda),
            ("ll_tol_scale", self.ll_tol_scale),
            ("pen_tol_scale", self.pen_tol_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        let counts = [
            ("n_g", self.n_g),
            ("ll_batch", self.ll_batch),
            ("pen_max_iters", self.pen_max_iters),
            ("svrg_epochs", self.svrg_epochs),
            ("svrg_batch0", self.svrg_batch0),
            ("svrg_batch_max", self.svrg_batch_max),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        let rel = |a: f64, b: f64| ((a - b) / b).abs();
        if rel(self.alpha1, self.alpha.powi(-2)) > 1e-12
            || rel(self.alpha2, self.alpha.powi(-4)) > 1e-12
            || rel(self.delta, self.alpha.powi(3)) > 1e-12
        {
            return Err(Error::InvalidConfig(
                "alpha1, alpha2 and delta must equal alpha^-2, alpha^-4 and alpha^3".into(),
            ));
        }
        Ok(())
    }

    /// SPD settings used by [`hypergradient`].
    pub fn spd_config<P: BilevelProblem + ?Sized>(&self, problem: &P) -> SpdConfig {
        let mut cfg = SpdConfig::for_problem(problem, self.ll_tol());
        if !problem.is_deterministic() {
            cfg.max_iters = if self.ll_max_iters > 0 {
                self.ll_max_iters
            } else {
                let curv = problem.curvature();
                let kappa = curv.c_g / curv.mu_g;
                ((4.0 * kappa * (1.0 / self.delta).ln()).ceil() as usize).max(20)
            };
            cfg.batch = self.ll_batch;
        }
        cfg
    }
}

/// Ramp from 0 at `z = −τδ` to 1 at `z = 0`.
pub fn sigma_h(z: f64, tau_delta: f64) -> f64 {
    if z < -tau_delta {
        0.0
    } else if z < 0.0 {
        (tau_delta + z) / tau_delta
    } else {
        1.0
    }
}

/// Ramp from 0 at `z = 0` to 1 at `z = ε_λ`.
pub fn sigma_lambda(z: f64, eps_lambda: f64) -> f64 {
    if z <= 0.0 {
        0.0
    } else if z < eps_lambda {
        z / eps_lambda
    } else {
        1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationState {
    pub rho: DVector<f64>,
    pub h_at_ytilde: DVector<f64>,
    pub lambda_tilde: DVector<f64>,
}

pub fn build_activation<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &DVector<f64>,
    ll: &LowerLevelSolution,
    cfg: &PenaltyConfig,
) -> Result<ActivationState> {
    let h = problem.constraints().values(x, &ll.y)?;
    if ll.lambda.len() != h.len() {
        return Err(Error::DimensionMismatch(format!(
            "lambda has {} entries, expected {}",
            ll.lambda.len(),
            h.len()
        )));
    }
    let td = cfg.tau_delta();
    let rho = h.zip_map(&ll.lambda, |hi, li| {
        sigma_h(hi, td) * sigma_lambda(li, cfg.eps_lambda)
    });
    Ok(ActivationState {
        rho,
        h_at_ytilde: h,
        lambda_tilde: ll.lambda.clone(),
    })
}

/// `L(x, y)`. The value-function term is the lower-level Lagrangian
/// `g(x, ỹ*) + λ̃ᵀh(x, ỹ*)`, so its x-derivative cancels `α₁Aᵀλ̃` when the
/// constraints depend on `x`. With a stream, `f` is sampled first and both
/// `g` terms share the next sample.
pub fn penalty_value<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &DVector<f64>,
    y: &DVector<f64>,
    ll: &LowerLevelSolution,
    act: &ActivationState,
    cfg: &PenaltyConfig,
    stream: Option<&mut NoiseStream>,
) -> f64 {
    let c = problem.constraints();
    let h = c.values_unchecked(x, y);
    let h_star = c.values_unchecked(x, &ll.y);
    let (f, g, g_star) = match stream {
        Some(s) => {
            let f = problem.f_value(x, y, Some(s));
            let mut twin = s.clone();
            let g = problem.g_value(x, y, Some(s));
            let g_star = problem.g_value(x, &ll.y, Some(&mut twin));
            (f, g, g_star)
        }
        None => (
            problem.f_value(x, y, None),
            problem.g_value(x, y, None),
            problem.g_value(x, &ll.y, None),
        ),
    };
    let quad: f64 = act
        .rho
        .iter()
        .zip(h.iter())
        .map(|(r, hi)| r * hi * hi)
        .sum();
    let lt = &act.lambda_tilde;
    f + cfg.alpha1 * (g + lt.dot(&h) - g_star - lt.dot(&h_star)) + 0.5 * cfg.alpha2 * quad
}

/// `∇_y L(x, y)` from one sample (or exactly, without a stream).
pub fn grad_y_penalty<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &DVector<f64>,
    y: &DVector<f64>,
    act: &ActivationState,
    cfg: &PenaltyConfig,
    mut stream: Option<&mut NoiseStream>,
) -> DVector<f64> {
    let c = problem.constraints();
    let gf = problem.grad_f(x, y, stream.as_deref_mut()).y;
    let gg = problem.grad_g(x, y, stream).y;
    let h = c.values_unchecked(x, y);
    let weighted = act.rho.component_mul(&h);
    gf + (gg - c.b_tr_mul(&act.lambda_tilde)) * cfg.alpha1 - c.b_tr_mul(&weighted) * cfg.alpha2
}

/// `∇_x L(x, y)` with `ỹ*`, `λ̃` and `ρ` held fixed. With a stream, `f` is
/// sampled first and both `∇_x g` terms share the next sample.
pub fn grad_x_penalty<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &DVector<f64>,
    y: &DVector<f64>,
    ll: &LowerLevelSolution,
    act: &ActivationState,
    cfg: &PenaltyConfig,
    stream: Option<&mut NoiseStream>,
) -> DVector<f64> {
    let fixed = fixed_x_terms(problem, x, y, act, cfg);
    sampled_x_terms(problem, x, y, &ll.y, cfg, stream) + fixed
}

/// `α₂ Aᵀ(ρ ∘ h(x, y))`: the noise-free part of `∇_x L`. The two `α₁Aᵀλ̃`
/// terms cancel.
fn fixed_x_terms<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &DVector<f64>,
    y: &DVector<f64>,
    act: &ActivationState,
    cfg: &PenaltyConfig,
) -> DVector<f64> {
    let c = problem.constraints();
    let h = c.values_unchecked(x, y);
    c.a_tr_mul(&act.rho.component_mul(&h)) * cfg.alpha2
}

fn sampled_x_terms<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &DVector<f64>,
    y: &DVector<f64>,
    y_star: &DVector<f64>,
    cfg: &PenaltyConfig,
    stream: Option<&mut NoiseStream>,
) -> DVector<f64> {
    match stream {
        Some(s) => {
            let gf = problem.grad_f(x, y, Some(s)).x;
            let mut twin = s.clone();
            let gg = problem.grad_g(x, y, Some(s)).x;
            let gg_star = problem.grad_g(x, y_star, Some(&mut twin)).x;
            gf + (gg - gg_star) * cfg.alpha1
        }
        None => {
            let gf = problem.grad_f(x, y, None).x;
            let gg = problem.grad_g(x, y, None).x;
            let gg_star = problem.grad_g(x, y_star, None).x;
            gf + (gg - gg_star) * cfg.alpha1
        }
    }
}

/// Strong-convexity and smoothness constants of `L(x, ·)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyCurvature {
    pub mu_pen: f64,
    pub l_pen: f64,
}

/// Lower bound `α₁μ_g − C_f` when positive; otherwise the exact smallest
/// eigenvalue of `∇²f + α₁∇²g + α₂ Bᵀdiag(ρ)B` when the problem supplies
/// Hessians.
pub fn penalty_curvature<P: BilevelProblem + ?Sized>(
    problem: &P,
    act: &ActivationState,
    cfg: &PenaltyConfig,
) -> Result<PenaltyCurvature> {
    let curv = problem.curvature();
    let c = problem.constraints();
    let l_pen = curv.c_f + cfg.alpha1 * curv.c_g + cfg.alpha2 * c.weighted_gram_row_bound(&act.rho);
    let bound = cfg.alpha1 * curv.mu_g - curv.c_f;
    if bound > 0.0 {
        return Ok(PenaltyCurvature { mu_pen: bound, l_pen });
    }
    match problem.hessians_yy() {
        Some((hf, hg)) => {
            let b = c.b();
            let weighted = DVector::from_iterator(b.nrows(), act.rho.iter().cloned());
            let mut hess = hf + hg * cfg.alpha1;
            let scaled = nalgebra::DMatrix::from_fn(b.nrows(), b.ncols(), |i, j| b[(i, j)] * weighted[i]);
            hess += b.tr_mul(&scaled) * cfg.alpha2;
            let (lo, _) = symmetric_extremes(&hess);
            if lo <= 0.0 {
                return Err(Error::NonConvexPenalty { lambda_min: lo });
            }
            Ok(PenaltyCurvature { mu_pen: lo, l_pen })
        }
        None => {
            log::warn!(
                "penalty strong convexity not certified (alpha1*mu_g - C_f = {bound:.3e}); \
                 proceeding with mu_pen = alpha1*mu_g"
            );
            Ok(PenaltyCurvature {
                mu_pen: cfg.alpha1 * curv.mu_g,
                l_pen,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyMinimum {
    pub y: DVector<f64>,
    pub iterations: usize,
    /// `‖∇_y L‖` at `y` (batch estimate when noisy).
    pub grad_norm: f64,
    pub curvature: PenaltyCurvature,
}

/// Minimizes `L(x, ·)` from `ỹ*` until `‖∇_y L‖ ≤ pen_tol_scale · μ_pen · δ`.
///
/// Noiseless problems use gradient descent with step `1/L_pen`. Noisy
/// problems run SVRG epochs: each snapshot gradient is a batch average whose
/// size doubles every epoch, and each inner step evaluates the sampled
/// gradient at the current point and at the snapshot with the same sample.
pub fn minimize_penalty<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &DVector<f64>,
    ll: &LowerLevelSolution,
    act: &ActivationState,
    cfg: &PenaltyConfig,
    stream: &mut NoiseStream,
) -> Result<PenaltyMinimum> {
    let curvature = penalty_curvature(problem, act, cfg)?;
    let step = 1.0 / curvature.l_pen;
    let target = cfg.pen_tol_scale * curvature.mu_pen * cfg.delta;
    let mut y = ll.y.clone();

    if problem.is_deterministic() {
        let mut iterations = 0;
        let mut grad = grad_y_penalty(problem, x, &y, act, cfg, None);
        while grad.norm() > target && iterations < cfg.pen_max_iters {
            y -= &grad * step;
            grad = grad_y_penalty(problem, x, &y, act, cfg, None);
            iterations += 1;
        }
        return Ok(PenaltyMinimum {
            y,
            iterations,
            grad_norm: grad.norm(),
            curvature,
        });
    }

    let inner = if cfg.svrg_inner > 0 {
        cfg.svrg_inner
    } else {
        (2.0 * curvature.l_pen / curvature.mu_pen).ceil() as usize
    };
    let mut iterations = 0;
    let mut batch = cfg.svrg_batch0;
    for _epoch in 0..cfg.svrg_epochs {
        let snapshot = y.clone();
        let full = batch_grad_y(problem, x, &snapshot, act, cfg, batch, stream);
        let grad_norm = full.norm();
        if grad_norm <= target {
            return Ok(PenaltyMinimum {
                y,
                iterations,
                grad_norm,
                curvature,
            });
        }
        for _ in 0..inner {
            let mut sample = stream.fork(iterations as u64);
            let at_y = grad_y_penalty(problem, x, &y, act, cfg, Some(&mut sample.clone()));
            let at_snap = grad_y_penalty(problem, x, &snapshot, act, cfg, Some(&mut sample));
            y -= (at_y - at_snap + &full) * step;
            iterations += 1;
        }
        batch = (batch * 2).min(cfg.svrg_batch_max);
    }
    let grad_norm = batch_grad_y(problem, x, &y, act, cfg, batch, stream).norm();
    Ok(PenaltyMinimum {
        y,
        iterations,
        grad_norm,
        curvature,
    })
}

fn batch_grad_y<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &DVector<f64>,
    y: &DVector<f64>,
    act: &ActivationState,
    cfg: &PenaltyConfig,
    batch: usize,
    stream: &mut NoiseStream,
) -> DVector<f64> {
    let c = problem.constraints();
    let gf = problem.grad_f_batch(x, y, batch, stream).y;
    let gg = problem.grad_g_batch(x, y, batch, stream).y;
    let h = c.values_unchecked(x, y);
    gf + (gg - c.b_tr_mul(&act.lambda_tilde)) * cfg.alpha1
        - c.b_tr_mul(&act.rho.component_mul(&h)) * cfg.alpha2
}

/// Inner-solver state shared by all `N_g` samples at one `x`.
#[derive(Clone, Debug)]
pub struct PreparedPoint {
    pub x: DVector<f64>,
    pub ll: LowerLevelSolution,
    pub activation: ActivationState,
    pub minimum: PenaltyMinimum,
}

/// One row of oracle diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleDiagnostics {
    pub alpha: f64,
    pub n_g: usize,
    pub ll_residual: f64,
    pub penalty_residual: f64,
    pub sample_variance: f64,
    pub inner_iters_ll: usize,
    pub inner_iters_pen: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HypergradientEstimate {
    pub grad: DVector<f64>,
    pub n_samples: usize,
    /// Trace of the unbiased sample covariance of the `N_g` samples
    /// (zero when `N_g = 1`).
    pub sample_variance: f64,
    pub inner_iters: usize,
    pub diagnostics: OracleDiagnostics,
}

/// Solves the lower level (stream fork 0), fixes the activation and
/// minimizes the penalty (fork 1).
pub fn prepare<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &DVector<f64>,
    cfg: &PenaltyConfig,
    stream: &NoiseStream,
) -> Result<PreparedPoint> {
    cfg.validate()?;
    let spd = cfg.spd_config(problem);
    let ll = spd_solve(problem, x, &spd, &mut stream.fork(0), None)?;
    let activation = build_activation(problem, x, &ll, cfg)?;
    let minimum = minimize_penalty(problem, x, &ll, &activation, cfg, &mut stream.fork(1))?;
    Ok(PreparedPoint {
        x: x.clone(),
        ll,
        activation,
        minimum,
    })
}

/// Averages `N_g` samples of `∇_x L` at the prepared point; sample `j` draws
/// from fork `2 + j` and the sum runs in index order.
pub fn estimate<P: BilevelProblem + ?Sized>(
    problem: &P,
    point: &PreparedPoint,
    cfg: &PenaltyConfig,
    stream: &NoiseStream,
) -> HypergradientEstimate {
    let x = &point.x;
    let y = &point.minimum.y;
    let fixed = fixed_x_terms(problem, x, y, &point.activation, cfg);
    let n_g = cfg.n_g.max(1);
    let (grad, sample_variance) = if problem.is_deterministic() {
        (sampled_x_terms(problem, x, y, &point.ll.y, cfg, None) + fixed, 0.0)
    } else {
        let samples: Vec<DVector<f64>> = (0..n_g)
            .map(|j| {
                let mut s = stream.fork(2 + j as u64);
                sampled_x_terms(problem, x, y, &point.ll.y, cfg, Some(&mut s))
            })
            .collect();
        let mut mean = DVector::zeros(x.len());
        for s in &samples {
            mean += s;
        }
        mean /= n_g as f64;
        let var = if n_g > 1 {
            samples.iter().map(|s| (s - &mean).norm_squared()).sum::<f64>() / (n_g - 1) as f64
        } else {
            0.0
        };
        (mean + fixed, var)
    };
    let diagnostics = OracleDiagnostics {
        alpha: cfg.alpha,
        n_g,
        ll_residual: point.ll.kkt_residual,
        penalty_residual: point.minimum.grad_norm,
        sample_variance,
        inner_iters_ll: point.ll.iterations,
        inner_iters_pen: point.minimum.iterations,
    };
    HypergradientEstimate {
        grad,
        n_samples: n_g,
        sample_variance,
        inner_iters: point.ll.iterations + point.minimum.iterations,
        diagnostics,
    }
}

/// Full oracle: [`prepare`] followed by [`estimate`].
pub fn hypergradient<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &DVector<f64>,
    cfg: &PenaltyConfig,
    stream: &NoiseStream,
) -> Result<HypergradientEstimate> {
    let point = prepare(problem, x, cfg, stream)?;
    Ok(estimate(problem, &point, cfg, stream))
}
