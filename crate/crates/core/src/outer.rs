//! Clipped nonsmooth outer loop with Goldstein block averaging.
//!
//! ```text
//! Δ₁ = 0
//! for t = 1..T:
//!     s_t ~ U[0, 1]
//!     x_t = x_{t−1} + Δ_t
//!     z_t = x_{t−1} + s_t Δ_t
//!     g_t = oracle(z_t)
//!     Δ_{t+1} = clip_D(Δ_t − η g_t)
//! x̄_k = mean of z over block k (M iterations each), k = 1..K
//! x_out = x̄_k for k uniform on 1..K
//! ```

use std::cell::Cell;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::penalty::{hypergradient, OracleDiagnostics, PenaltyConfig};
use crate::problem::{BilevelProblem, CountingProblem, UpperSet};
use crate::rng::NoiseStream;

const STEP_STREAM: u64 = 0;
const ORACLE_STREAM: u64 = 1;
const OUTPUT_STREAM: u64 = 2;

/// Relative slack for `floor`/`ceil` of ratios that are integers in exact
/// arithmetic but land just below or above them in floating point.
const ROUNDING_SLACK: f64 = 1e-9;

fn floor_ratio(num: f64, den: f64) -> usize {
    let r = num / den;
    (r * (1.0 + ROUNDING_SLACK)).floor() as usize
}

fn ceil_ratio(num: f64, den: f64) -> usize {
    let r = num / den;
    (r * (1.0 - ROUNDING_SLACK)).ceil() as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterConfig {
    /// Clip radius `D`.
    #[serde(rename = "D")]
    pub clip_radius: f64,
    pub eta: f64,
    #[serde(rename = "T")]
    pub iterations: usize,
    pub goldstein_delta: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Starting point; zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Record `F(x_t)` every this many iterations (and at `t = T`); `0`
    /// records only the endpoints.
    #[serde(default)]
    pub instrument_stride: usize,
    /// Project `x_t` onto a box upper-level set after each update.
    #[serde(default = "default_true")]
    pub project_upper: bool,
}

fn default_true() -> bool {
    true
}

impl OuterConfig {
    /// Block length `M = ⌊δ / D⌋`.
    pub fn block_len(&self) -> usize {
        floor_ratio(self.goldstein_delta, self.clip_radius)
    }

    /// Block count `K = ⌊T / M⌋`; a ragged tail is dropped.
    pub fn blocks(&self) -> usize {
        self.iterations / self.block_len().max(1)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("D", self.clip_radius),
            ("eta", self.eta),
            ("goldstein_delta", self.goldstein_delta),
            ("epsilon", self.epsilon),
        ] {
            if !(v >= 0.0 && v.is_finite()) || (name != "eta" && v == 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.block_len() < 1 {
            return Err(Error::InvalidConfig(format!(
                "block length floor(delta/D) = floor({}/{}) is zero",
                self.goldstein_delta, self.clip_radius
            )));
        }
        if self.blocks() < 1 {
            return Err(Error::InvalidConfig(format!(
                "T = {} is shorter than one block of {} iterations",
                self.iterations,
                self.block_len()
            )));
        }
        Ok(())
    }
}

/// `min(1, D/‖v‖) · v`.
pub fn clip(v: &DVector<f64>, radius: f64) -> DVector<f64> {
    let n = v.norm();
    if n <= radius {
        v.clone()
    } else {
        v * (radius / n)
    }
}

/// Multipliers on the rates in [`calibrate_with`]; all default to 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConstants {
    pub clip: f64,
    pub eta: f64,
    pub n_g: f64,
    pub blocks: f64,
}

impl Default for CalibrationConstants {
    fn default() -> Self {
        Self {
            clip: 1.0,
            eta: 1.0,
            n_g: 1.0,
            blocks: 1.0,
        }
    }
}

/// Parameter rates with unit constants; see [`calibrate_with`].
pub fn calibrate(
    epsilon: f64,
    goldstein_delta: f64,
    lipschitz: f64,
    sigma: f64,
    gap: f64,
) -> Result<(OuterConfig, PenaltyConfig)> {
    calibrate_with(
        epsilon,
        goldstein_delta,
        lipschitz,
        sigma,
        gap,
        CalibrationConstants::default(),
    )
}

/// `α = ε`, `D = δε²/L²`, `M = max(1, ⌊δ/D⌋)`, `η = δε³/L⁴`,
/// `N_g = max(1, ⌈σ²/α²⌉)`, `K = ⌈gap/(δε)⌉`, `T = K M`.
pub fn calibrate_with(
    epsilon: f64,
    goldstein_delta: f64,
    lipschitz: f64,
    sigma: f64,
    gap: f64,
    k: CalibrationConstants,
) -> Result<(OuterConfig, PenaltyConfig)> {
    for (name, v) in [
        ("epsilon", epsilon),
        ("goldstein_delta", goldstein_delta),
        ("lipschitz", lipschitz),
        ("gap", gap),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
    }
    if !(sigma >= 0.0) {
        return Err(Error::InvalidConfig("sigma must be nonnegative".into()));
    }
    let alpha = epsilon;
    let l2 = lipschitz * lipschitz;
    let clip_radius = k.clip * goldstein_delta * epsilon * epsilon / l2;
    let block_len = floor_ratio(goldstein_delta, clip_radius).max(1);
    let eta = k.eta * goldstein_delta * epsilon.powi(3) / (l2 * l2);
    let n_g = ceil_ratio(k.n_g * sigma * sigma, alpha * alpha).max(1);
    let blocks = ceil_ratio(k.blocks * gap, goldstein_delta * epsilon).max(1);
    let outer = OuterConfig {
        clip_radius,
        eta,
        iterations: blocks * block_len,
        goldstein_delta,
        epsilon,
        seed: 0,
        x0: None,
        instrument_stride: 0,
        project_upper: true,
    };
    Ok((outer, PenaltyConfig::new(alpha).with_n_g(n_g)))
}

/// Per-iteration trace row.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub s: f64,
    pub x: DVector<f64>,
    pub z: DVector<f64>,
    pub g: DVector<f64>,
    /// `‖Δ_t‖`, the step taken to reach `x_t`.
    pub norm_delta: f64,
    pub norm_g: f64,
    pub f_true: Option<f64>,
    pub oracle_calls: u64,
    pub elapsed_s: f64,
    pub diagnostics: Option<OracleDiagnostics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockRow {
    /// 1-based block index.
    pub k: usize,
    pub x_bar: DVector<f64>,
    pub gap_estimate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunTrace {
    pub x0: DVector<f64>,
    pub f_initial: Option<f64>,
    pub rows: Vec<TraceRow>,
    pub blocks: Vec<BlockRow>,
    pub block_len: usize,
    pub x_out: Option<DVector<f64>>,
    /// 1-based index of the block returned as `x_out`.
    pub out_block: Option<usize>,
    /// Whether `x_t` was projected onto a box upper-level set.
    pub projected: bool,
    /// Oracle failure that ended the run early.
    pub error: Option<String>,
}

impl RunTrace {
    /// Last recorded `F` value, falling back to `f_initial`.
    pub fn last_f(&self) -> Option<f64> {
        self.rows
            .iter()
            .rev()
            .find_map(|r| r.f_true)
            .or(self.f_initial)
    }
}

/// Gradient source for [`run_with_oracle`]. Each call receives a stream
/// reserved for that iteration.
pub trait HypergradientOracle {
    fn gradient(
        &mut self,
        z: &DVector<f64>,
        stream: &NoiseStream,
    ) -> Result<(DVector<f64>, Option<OracleDiagnostics>)>;
}

impl<F> HypergradientOracle for F
where
    F: FnMut(&DVector<f64>, &NoiseStream) -> Result<DVector<f64>>,
{
    fn gradient(
        &mut self,
        z: &DVector<f64>,
        stream: &NoiseStream,
    ) -> Result<(DVector<f64>, Option<OracleDiagnostics>)> {
        Ok((self(z, stream)?, None))
    }
}

/// The penalty hypergradient oracle as a [`HypergradientOracle`].
pub struct PenaltyOracle<'a, P: BilevelProblem + ?Sized> {
    pub problem: &'a P,
    pub config: PenaltyConfig,
}

impl<P: BilevelProblem + ?Sized> HypergradientOracle for PenaltyOracle<'_, P> {
    fn gradient(
        &mut self,
        z: &DVector<f64>,
        stream: &NoiseStream,
    ) -> Result<(DVector<f64>, Option<OracleDiagnostics>)> {
        let est = hypergradient(self.problem, z, &self.config, stream)?;
        Ok((est.grad, Some(est.diagnostics)))
    }
}

/// Optional `F(x)` evaluator used for instrumentation.
pub type Instrument<'a> = &'a mut dyn FnMut(&DVector<f64>) -> Option<f64>;

/// Runs the outer loop with the penalty oracle. Oracle calls are counted as
/// stochastic gradient evaluations of `f` and `g`.
pub fn run<P: BilevelProblem + ?Sized>(
    problem: &P,
    outer: &OuterConfig,
    penalty: &PenaltyConfig,
    stream: &NoiseStream,
    instrument: Option<Instrument<'_>>,
) -> Result<RunTrace> {
    penalty.validate()?;
    let counted = CountingProblem::new(problem);
    let mut oracle = PenaltyOracle {
        problem: &counted,
        config: penalty.clone(),
    };
    let upper_set = problem.upper_set().clone();
    run_inner(
        problem.upper_dim(),
        &upper_set,
        outer,
        &mut oracle,
        stream,
        instrument,
        &|| counted.calls(),
    )
}

/// Runs the outer loop with an arbitrary oracle; `oracle_calls` counts
/// oracle invocations.
pub fn run_with_oracle(
    dim: usize,
    upper_set: &UpperSet,
    outer: &OuterConfig,
    oracle: &mut dyn HypergradientOracle,
    stream: &NoiseStream,
    instrument: Option<Instrument<'_>>,
) -> Result<RunTrace> {
    let calls = Cell::new(0u64);
    let mut counted = CountingOracle {
        inner: oracle,
        calls: &calls,
    };
    run_inner(dim, upper_set, outer, &mut counted, stream, instrument, &|| calls.get())
}

struct CountingOracle<'a, 'o> {
    inner: &'o mut dyn HypergradientOracle,
    calls: &'a Cell<u64>,
}

impl HypergradientOracle for CountingOracle<'_, '_> {
    fn gradient(
        &mut self,
        z: &DVector<f64>,
        stream: &NoiseStream,
    ) -> Result<(DVector<f64>, Option<OracleDiagnostics>)> {
        self.calls.set(self.calls.get() + 1);
        self.inner.gradient(z, stream)
    }
}

fn run_inner(
    dim: usize,
    upper_set: &UpperSet,
    outer: &OuterConfig,
    oracle: &mut dyn HypergradientOracle,
    stream: &NoiseStream,
    mut instrument: Option<Instrument<'_>>,
    calls: &dyn Fn() -> u64,
) -> Result<RunTrace> {
    outer.validate()?;
    let x0 = match &outer.x0 {
        Some(v) if v.len() != dim => {
            return Err(Error::DimensionMismatch(format!(
                "x0 has {} entries, expected {dim}",
                v.len()
            )))
        }
        Some(v) => DVector::from_column_slice(v),
        None => DVector::zeros(dim),
    };
    let projected = outer.project_upper && matches!(upper_set, UpperSet::Box { .. });
    let start = Instant::now();
    let mut steps = stream.fork(STEP_STREAM);
    let oracle_streams = stream.fork(ORACLE_STREAM);
    let f_initial = instrument.as_mut().and_then(|f| f(&x0));

    let t_total = outer.iterations;
    let mut rows = Vec::with_capacity(t_total);
    let mut delta = DVector::zeros(dim);
    let mut x = x0.clone();
    let mut error = None;
    for t in 1..=t_total {
        let s = steps.uniform();
        let z = &x + &delta * s;
        let mut x_next = &x + &delta;
        if projected {
            x_next = upper_set.project(&x_next);
        }
        let norm_delta = delta.norm();
        let (g, diagnostics) = match oracle.gradient(&z, &oracle_streams.fork(t as u64)) {
            Ok(out) => out,
            Err(e) => {
                error = Some(format!("iteration {t}: {e}"));
                break;
            }
        };
        delta = clip(&(&delta - &g * outer.eta), outer.clip_radius);
        x = x_next;
        let record = t == t_total
            || (outer.instrument_stride > 0 && t % outer.instrument_stride == 0);
        let f_true = if record {
            instrument.as_mut().and_then(|f| f(&x))
        } else {
            None
        };
        rows.push(TraceRow {
            t,
            s,
            norm_g: g.norm(),
            x: x.clone(),
            z,
            g,
            norm_delta,
            f_true,
            oracle_calls: calls(),
            elapsed_s: start.elapsed().as_secs_f64(),
            diagnostics,
        });
    }

    let block_len = outer.block_len();
    let k_total = rows.len() / block_len;
    let blocks: Vec<BlockRow> = (1..=k_total)
        .map(|k| {
            let block = &rows[(k - 1) * block_len..k * block_len];
            BlockRow {
                k,
                x_bar: mean(block.iter().map(|r| &r.z), dim),
                gap_estimate: mean(block.iter().map(|r| &r.g), dim).norm(),
            }
        })
        .collect();
    let (x_out, out_block) = if error.is_none() && !blocks.is_empty() {
        let u = stream.fork(OUTPUT_STREAM).uniform();
        let k = ((u * blocks.len() as f64) as usize).min(blocks.len() - 1);
        (Some(blocks[k].x_bar.clone()), Some(k + 1))
    } else {
        (None, None)
    };
    Ok(RunTrace {
        x0,
        f_initial,
        rows,
        blocks,
        block_len,
        x_out,
        out_block,
        projected,
        error,
    })
}

fn mean<'a>(vs: impl Iterator<Item = &'a DVector<f64>>, dim: usize) -> DVector<f64> {
    let mut acc = DVector::zeros(dim);
    let mut count = 0usize;
    for v in vs {
        acc += v;
        count += 1;
    }
    if count > 0 {
        acc /= count as f64;
    }
    acc
}

/// `‖(1/M) Σ g_t‖` over block `k` (1-based), recomputed from the trace rows.
///
/// Up to the oracle bias this bounds the distance from zero to the Goldstein
/// `δ`-subdifferential at `x̄_k`, since every `z_t` in the block lies within
/// `M D ≤ δ` of `x̄_k`.
pub fn goldstein_gap_estimate(trace: &RunTrace, k: usize) -> Option<f64> {
    let m = trace.block_len;
    if k == 0 || k * m > trace.rows.len() {
        return None;
    }
    let dim = trace.x0.len();
    Some(mean(trace.rows[(k - 1) * m..k * m].iter().map(|r| &r.g), dim).norm())
}

/// Trailing moving average of the block gap estimates over `window` blocks.
pub fn smoothed_gaps(trace: &RunTrace, window: usize) -> Vec<f64> {
    let gaps: Vec<f64> = trace.blocks.iter().map(|b| b.gap_estimate).collect();
    let w = window.max(1);
    (0..gaps.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            gaps[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Largest `‖z_t − x̄_k‖` over all complete blocks.
pub fn max_block_spread(trace: &RunTrace) -> f64 {
    let m = trace.block_len;
    trace
        .blocks
        .iter()
        .flat_map(|b| {
            trace.rows[(b.k - 1) * m..b.k * m]
                .iter()
                .map(move |r| (&r.z - &b.x_bar).norm())
        })
        .fold(0.0, f64::max)
}
