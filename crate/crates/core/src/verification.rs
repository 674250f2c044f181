//! Independent checks of the penalty oracle: bias and variance probes
//! against the exact hypergradient, the MSE bound, and an implicit-gradient
//! baseline that differentiates through the lower-level KKT system.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lower_level::{spd_solve, SpdConfig};
use crate::penalty::{estimate, hypergradient, prepare, PenaltyConfig};
use crate::problem::BilevelProblem;
use crate::quadratic::QuadraticInstance;
use crate::rng::NoiseStream;

/// Points whose strictness margin falls below this are excluded from bias
/// measurements.
pub const STRICT_MARGIN: f64 = 1e-4;

/// Tolerance of the exact solves used as ground truth.
pub const EXACT_TOL: f64 = 1e-12;

/// `min_i max(|h_i|, λ_i)` at the exact lower-level solution: small values
/// mean some row is nearly active with a nearly zero multiplier.
pub fn strictness_margin(inst: &QuadraticInstance, x: &DVector<f64>) -> Result<f64> {
    let sol = inst.exact_lower_solve(x, EXACT_TOL)?;
    let h = inst.constraints().values(x, &sol.y)?;
    Ok(h
        .iter()
        .zip(sol.lambda.iter())
        .map(|(hi, li)| hi.abs().max(*li))
        .fold(f64::INFINITY, f64::min))
}

/// Probe point used for instance `seed`: a standard normal draw.
pub fn probe_point(dim: usize, seed: u64) -> DVector<f64> {
    NoiseStream::new(100 + seed).normal_vector(dim)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeCell {
    pub alpha: f64,
    pub n_g: usize,
    pub trials: usize,
    /// `‖mean estimate − ∇F‖`.
    pub bias_norm: f64,
    /// Standard error of the mean estimate, `sqrt(variance / trials)`.
    pub bias_stderr: f64,
    /// Trace of the across-trial covariance of the estimate.
    pub variance: f64,
    /// Mean of `‖estimate − ∇F‖²`.
    pub mse: f64,
    /// Estimated variance of a single `∇_x L` sample.
    pub single_sample_variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceRatio {
    pub n_g_small: usize,
    pub n_g_large: usize,
    /// `var(n_g_small) / var(n_g_large)`; ideally `n_g_large / n_g_small`.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasVarianceReport {
    pub alpha_grid: Vec<f64>,
    pub cells: Vec<ProbeCell>,
    /// Least-squares slope of `log(bias)` against `log(α)`.
    pub bias_slope: Option<f64>,
    pub variance_ratios: Vec<VarianceRatio>,
    pub notes: Vec<String>,
}

impl BiasVarianceReport {
    fn empty(alpha_grid: Vec<f64>, note: String) -> Self {
        Self {
            alpha_grid,
            cells: vec![],
            bias_slope: None,
            variance_ratios: vec![],
            notes: vec![note],
        }
    }

    /// Whether the bias decreases strictly along the grid order.
    pub fn bias_monotone(&self) -> bool {
        self.cells.windows(2).all(|w| w[1].bias_norm < w[0].bias_norm)
    }
}

/// Least-squares slope of `ys` against `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

fn cell_from_samples(
    alpha: f64,
    n_g: usize,
    samples: &[DVector<f64>],
    per_sample_variances: &[f64],
    exact: &DVector<f64>,
) -> ProbeCell {
    let trials = samples.len();
    let mut mean = DVector::zeros(exact.len());
    for s in samples {
        mean += s;
    }
    mean /= trials as f64;
    let variance = if trials > 1 {
        samples.iter().map(|s| (s - &mean).norm_squared()).sum::<f64>() / (trials - 1) as f64
    } else {
        0.0
    };
    let mse = samples.iter().map(|s| (s - exact).norm_squared()).sum::<f64>() / trials as f64;
    let single_sample_variance = if n_g > 1 {
        per_sample_variances.iter().sum::<f64>() / trials as f64
    } else {
        variance
    };
    ProbeCell {
        alpha,
        n_g,
        trials,
        bias_norm: (&mean - exact).norm(),
        bias_stderr: (variance / trials as f64).sqrt(),
        variance,
        mse,
        single_sample_variance,
    }
}

/// For each `α`, averages `trials` independent oracle outputs (fresh inner
/// solves per trial) and compares with the exact hypergradient.
///
/// Points failing the strictness margin produce an empty report with a note.
pub fn bias_probe(
    inst: &QuadraticInstance,
    x: &DVector<f64>,
    alpha_grid: &[f64],
    trials: usize,
    template: &PenaltyConfig,
    stream: &NoiseStream,
) -> Result<BiasVarianceReport> {
    if trials == 0 || alpha_grid.is_empty() {
        return Err(Error::InvalidConfig("bias probe needs trials and alphas".into()));
    }
    let margin = strictness_margin(inst, x)?;
    if margin < STRICT_MARGIN {
        return Ok(BiasVarianceReport::empty(
            alpha_grid.to_vec(),
            format!("skipped: strictness margin {margin:.3e} below {STRICT_MARGIN:.0e}"),
        ));
    }
    let exact = inst.exact_hypergradient(x, EXACT_TOL)?;
    let mut cells = Vec::with_capacity(alpha_grid.len());
    for (ci, &alpha) in alpha_grid.iter().enumerate() {
        let cfg = template.with_alpha(alpha);
        let cell_stream = stream.fork(ci as u64);
        let mut samples = Vec::with_capacity(trials);
        let mut variances = Vec::with_capacity(trials);
        for t in 0..trials {
            let est = hypergradient(inst, x, &cfg, &cell_stream.fork(t as u64))?;
            variances.push(est.sample_variance);
            samples.push(est.grad);
        }
        cells.push(cell_from_samples(alpha, cfg.n_g, &samples, &variances, &exact));
    }
    let (lx, ly): (Vec<f64>, Vec<f64>) = cells
        .iter()
        .filter(|c| c.bias_norm > 0.0)
        .map(|c| (c.alpha.ln(), c.bias_norm.ln()))
        .unzip();
    Ok(BiasVarianceReport {
        alpha_grid: alpha_grid.to_vec(),
        bias_slope: fit_slope(&lx, &ly),
        cells,
        variance_ratios: vec![],
        notes: vec![format!("strictness margin {margin:.3e}")],
    })
}

/// Variance of the `N_g`-sample average with the inner solves held fixed:
/// one [`prepare`] call, then `trials` estimates per `N_g` from fresh
/// sample streams.
pub fn variance_probe(
    inst: &QuadraticInstance,
    x: &DVector<f64>,
    alpha: f64,
    n_g_list: &[usize],
    trials: usize,
    template: &PenaltyConfig,
    stream: &NoiseStream,
) -> Result<BiasVarianceReport> {
    if trials < 2 || n_g_list.is_empty() || n_g_list.contains(&0) {
        return Err(Error::InvalidConfig(
            "variance probe needs at least two trials and positive N_g values".into(),
        ));
    }
    let cfg = template.with_alpha(alpha);
    let point = prepare(inst, x, &cfg, &stream.fork(0))?;
    let mut notes = vec![];
    let exact = match strictness_margin(inst, x) {
        Ok(m) if m >= STRICT_MARGIN => Some(inst.exact_hypergradient(x, EXACT_TOL)?),
        Ok(m) => {
            notes.push(format!(
                "strictness margin {m:.3e} below {STRICT_MARGIN:.0e}; bias not measured"
            ));
            None
        }
        Err(e) => return Err(e),
    };
    let mut cells = Vec::with_capacity(n_g_list.len());
    for (ci, &n_g) in n_g_list.iter().enumerate() {
        let cell_cfg = cfg.clone().with_n_g(n_g);
        let cell_stream = stream.fork(1 + ci as u64);
        let mut samples = Vec::with_capacity(trials);
        let mut variances = Vec::with_capacity(trials);
        for t in 0..trials {
            let est = estimate(inst, &point, &cell_cfg, &cell_stream.fork(t as u64));
            variances.push(est.sample_variance);
            samples.push(est.grad);
        }
        let reference = exact.clone().unwrap_or_else(|| {
            let mut m = DVector::zeros(x.len());
            for s in &samples {
                m += s;
            }
            m / trials as f64
        });
        let mut cell = cell_from_samples(alpha, n_g, &samples, &variances, &reference);
        if exact.is_none() {
            cell.bias_norm = f64::NAN;
        }
        cells.push(cell);
    }
    let mut variance_ratios = vec![];
    for a in &cells {
        for b in &cells {
            if b.n_g > a.n_g {
                variance_ratios.push(VarianceRatio {
                    n_g_small: a.n_g,
                    n_g_large: b.n_g,
                    ratio: a.variance / b.variance,
                });
            }
        }
    }
    Ok(BiasVarianceReport {
        alpha_grid: vec![alpha],
        cells,
        bias_slope: None,
        variance_ratios,
        notes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseCellCheck {
    pub alpha: f64,
    pub n_g: usize,
    pub mse: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseCheck {
    pub pass: bool,
    /// `max bias/α` over the cells.
    pub c_hat: f64,
    /// `max` single-sample variance over the cells.
    pub sigma2_hat: f64,
    pub cells: Vec<MseCellCheck>,
}

/// Checks `MSE ≤ 1.25 (2 Ĉ² α² + 2 σ̂² / N_g)` on every cell with a measured
/// bias.
pub fn mse_check(reports: &[&BiasVarianceReport]) -> MseCheck {
    let cells: Vec<&ProbeCell> = reports
        .iter()
        .flat_map(|r| r.cells.iter())
        .filter(|c| c.bias_norm.is_finite())
        .collect();
    let c_hat = cells
        .iter()
        .map(|c| c.bias_norm / c.alpha)
        .fold(0.0, f64::max);
    let sigma2_hat = cells
        .iter()
        .map(|c| c.single_sample_variance)
        .fold(0.0, f64::max);
    let checks: Vec<MseCellCheck> = cells
        .iter()
        .map(|c| MseCellCheck {
            alpha: c.alpha,
            n_g: c.n_g,
            mse: c.mse,
            bound: 2.0 * c_hat * c_hat * c.alpha * c.alpha
                + 2.0 * sigma2_hat / c.n_g as f64,
        })
        .collect();
    MseCheck {
        pass: checks.iter().all(|c| c.mse <= 1.25 * c.bound),
        c_hat,
        sigma2_hat,
        cells: checks,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub spd: SpdConfig,
    /// Samples of `∇f` averaged per call.
    pub batch: usize,
    /// Rows with `λ_i` above this are treated as active.
    pub active_tol: f64,
    /// Fail on weakly active rows instead of treating them as inactive.
    pub strict: bool,
}

impl BaselineConfig {
    pub fn for_problem(inst: &QuadraticInstance, tol: f64) -> Self {
        Self {
            spd: SpdConfig::for_problem(inst, tol),
            batch: 16,
            active_tol: tol,
            strict: true,
        }
    }
}

/// Implicit-function hypergradient from the SPD solution and a batch of
/// stochastic `∇f` samples. Forms `dy*/dx` with a dense factorization of
/// the free block of `∇²_yy g`.
pub fn implicit_gradient_baseline(
    inst: &QuadraticInstance,
    x: &DVector<f64>,
    cfg: &BaselineConfig,
    stream: &NoiseStream,
) -> Result<DVector<f64>> {
    let ll = spd_solve(inst, x, &cfg.spd, &mut stream.fork(0), None)?;
    let gf = if inst.is_deterministic() {
        inst.grad_f(x, &ll.y, None)
    } else {
        inst.grad_f_batch(x, &ll.y, cfg.batch, &mut stream.fork(1))
    };
    inst.implicit_gradient_at(x, &ll.y, &ll.lambda, &gf, cfg.active_tol, cfg.strict)
}
