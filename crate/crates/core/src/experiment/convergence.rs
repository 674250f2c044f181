use std::time::Instant;

use nalgebra::DVector;
use serde_json::{json, Value};

use super::output::{fmt_float, fmt_opt, write_csv, write_json, LIBRARY_VERSION};
use super::{BaselineSpec, ExperimentSpec, Method};
use crate::error::Result;
use crate::outer::{self, smoothed_gaps, Instrument, RunTrace, TraceRow};
use crate::penalty::PenaltyConfig;
use crate::problem::BilevelProblem;
use crate::quadratic::QuadraticInstance;
use crate::rng::NoiseStream;
use crate::verification::{implicit_gradient_baseline, BaselineConfig, EXACT_TOL};

const F2CSA_STREAM: u64 = 1;
const BASELINE_STREAM: u64 = 2;

/// Lower-level tolerance used when evaluating `F` for instrumentation.
const F_TOL: f64 = 1e-10;

/// Smallest `F` found by exact-hypergradient descent from `x0` with
/// backtracking (at most `max_iters` steps).
pub fn reference_minimum(inst: &QuadraticInstance, x0: &DVector<f64>, max_iters: usize) -> Result<f64> {
    let exact = inst.clone().with_noise(0.0);
    let mut x = x0.clone();
    let mut fx = exact.f_true(&x, F_TOL)?;
    let mut step = 1.0;
    for _ in 0..max_iters {
        let g = lenient_hypergradient(&exact, &x)?;
        if g.norm() <= 1e-8 {
            break;
        }
        let mut accepted = false;
        while step > 1e-12 {
            let cand = exact.upper_set().project(&(&x - &g * step));
            let fc = exact.f_true(&cand, F_TOL)?;
            if fc <= fx - 1e-4 * step * g.norm_squared() {
                x = cand;
                fx = fc;
                step *= 2.0;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(fx)
}

/// Exact hypergradient, treating weakly active rows as inactive.
fn lenient_hypergradient(inst: &QuadraticInstance, x: &DVector<f64>) -> Result<DVector<f64>> {
    let sol = inst.exact_lower_solve(x, EXACT_TOL)?;
    let gf = inst.grad_f(x, &sol.y, None);
    inst.implicit_gradient_at(x, &sol.y, &sol.lambda, &gf, 1e-9, false)
}

/// Projected SGD with the implicit-gradient oracle. The returned trace has no
/// blocks; `x_out` is the last iterate and `norm_delta` the step length.
pub fn run_baseline(
    inst: &QuadraticInstance,
    x0: &DVector<f64>,
    iterations: usize,
    spec: &BaselineSpec,
    cfg: &BaselineConfig,
    stream: &NoiseStream,
    stride: usize,
    mut instrument: Option<Instrument<'_>>,
) -> RunTrace {
    let start = Instant::now();
    let f_initial = instrument.as_mut().and_then(|f| f(x0));
    let mut x = x0.clone();
    let mut rows = Vec::with_capacity(iterations);
    let mut error = None;
    for t in 1..=iterations {
        let g = match implicit_gradient_baseline(inst, &x, cfg, &stream.fork(t as u64)) {
            Ok(g) => g,
            Err(e) => {
                error = Some(format!("iteration {t}: {e}"));
                break;
            }
        };
        let beta = spec.step0 / (1.0 + (t - 1) as f64 / spec.decay).sqrt();
        let next = inst.upper_set().project(&(&x - &g * beta));
        let norm_delta = (&next - &x).norm();
        let z = x.clone();
        x = next;
        let record = t == iterations || (stride > 0 && t % stride == 0);
        let f_true = if record {
            instrument.as_mut().and_then(|f| f(&x))
        } else {
            None
        };
        rows.push(TraceRow {
            t,
            s: f64::NAN,
            x: x.clone(),
            z,
            norm_g: g.norm(),
            g,
            norm_delta,
            f_true,
            oracle_calls: t as u64,
            elapsed_s: start.elapsed().as_secs_f64(),
            diagnostics: None,
        });
    }
    RunTrace {
        x0: x0.clone(),
        f_initial,
        x_out: error.is_none().then(|| x.clone()),
        rows,
        blocks: vec![],
        block_len: 1,
        out_block: None,
        projected: matches!(inst.upper_set(), crate::problem::UpperSet::Box { .. }),
        error,
    }
}

pub(super) fn baseline_config(
    inst: &QuadraticInstance,
    penalty: &PenaltyConfig,
    spec: &BaselineSpec,
) -> BaselineConfig {
    BaselineConfig {
        spd: penalty.spd_config(inst),
        batch: spec.batch,
        active_tol: spec.active_tol,
        strict: false,
    }
}

pub(super) fn trace_rows(trace: &RunTrace) -> Vec<Vec<String>> {
    trace
        .rows
        .iter()
        .map(|r| {
            vec![
                r.t.to_string(),
                fmt_float(r.s),
                fmt_float(r.norm_delta),
                fmt_float(r.norm_g),
                fmt_opt(r.f_true),
                r.oracle_calls.to_string(),
                fmt_float(r.elapsed_s),
            ]
        })
        .collect()
}

pub(super) const TRACE_HEADER: &[&str] =
    &["t", "s_t", "norm_delta", "norm_g", "F_true", "oracle_calls", "elapsed_s"];

fn opt_json(v: Option<f64>) -> Value {
    match v {
        Some(x) if x.is_finite() => json!(x),
        _ => Value::Null,
    }
}

/// One run per (seed, method) on a `dims[0]`-dimensional instance. The
/// penalty method's final loss is `F` at its last block average; the
/// baseline's is `F` at its last iterate.
pub fn run_convergence(spec: &ExperimentSpec) -> Result<Value> {
    let dir = spec.out_dir()?.to_path_buf();
    let d = spec.dims[0];
    let mut runs = vec![];
    let mut table = vec![];
    for &seed in &spec.seeds {
        let inst = QuadraticInstance::generate(d, d, seed, spec.noise_sigma);
        let exact = inst.clone().with_noise(0.0);
        let (outer_cfg, penalty) = spec.configs(&inst, seed)?;
        let x0 = DVector::zeros(d);
        let f_reference = reference_minimum(&exact, &x0, 500).ok();
        let mut row = serde_json::Map::new();
        row.insert("seed".into(), json!(seed));
        for &method in &spec.methods {
            let stem = format!("convergence_d{d}_seed{seed}_{}", method.name());
            let mut f_eval = |x: &DVector<f64>| exact.f_true(x, F_TOL).ok();
            let start = Instant::now();
            let (trace, meta_cfg) = match method {
                Method::F2csa => {
                    let trace = outer::run(
                        &inst,
                        &outer_cfg,
                        &penalty,
                        &NoiseStream::new(seed).fork(F2CSA_STREAM),
                        Some(&mut f_eval),
                    )?;
                    let cfg = json!({"outer": outer_cfg, "penalty": penalty});
                    (trace, cfg)
                }
                Method::ImplicitBaseline => {
                    let bc = baseline_config(&inst, &penalty, &spec.baseline);
                    let trace = run_baseline(
                        &inst,
                        &x0,
                        outer_cfg.iterations,
                        &spec.baseline,
                        &bc,
                        &NoiseStream::new(seed).fork(BASELINE_STREAM),
                        spec.instrument_stride,
                        Some(&mut f_eval),
                    );
                    let cfg = json!({"baseline": spec.baseline, "oracle": bc});
                    (trace, cfg)
                }
            };
            let wall_s = start.elapsed().as_secs_f64();
            let final_point = match method {
                Method::F2csa => trace.blocks.last().map(|b| b.x_bar.clone()),
                Method::ImplicitBaseline => trace.x_out.clone(),
            };
            let f_final = final_point.and_then(|x| exact.f_true(&x, F_TOL).ok());
            let comments = spec.comments(Some(seed))?;
            write_csv(&dir.join(format!("{stem}.csv")), &comments, TRACE_HEADER, &trace_rows(&trace))?;
            let gaps = smoothed_gaps(&trace, 5);
            if method == Method::F2csa {
                let rows: Vec<Vec<String>> = trace
                    .blocks
                    .iter()
                    .map(|b| vec![b.k.to_string(), fmt_float(b.gap_estimate)])
                    .collect();
                write_csv(&dir.join(format!("{stem}_blocks.csv")), &comments, &["k", "gap_estimate"], &rows)?;
            }
            write_json(
                &dir.join(format!("{stem}_meta.json")),
                &json!({
                    "library_version": LIBRARY_VERSION,
                    "spec": spec,
                    "seeds": spec.seeds,
                    "seed": seed,
                    "method": method.name(),
                    "dim": d,
                    "instance_hash": inst.fingerprint(),
                    "config": meta_cfg,
                    "out_block": trace.out_block,
                    "projected": trace.projected,
                    "error": trace.error,
                }),
            )?;
            row.insert(method.name().into(), opt_json(f_final));
            runs.push(json!({
                "method": method.name(),
                "seed": seed,
                "f_initial": opt_json(trace.f_initial),
                "f_final": opt_json(f_final),
                "f_reference": opt_json(f_reference),
                "first_smoothed_gap": opt_json(gaps.first().copied()),
                "final_smoothed_gap": opt_json(gaps.last().copied()),
                "iterations": trace.rows.len(),
                "oracle_calls": trace.rows.last().map(|r| r.oracle_calls).unwrap_or(0),
                "wall_s": wall_s,
                "trace_file": format!("{stem}.csv"),
                "error": trace.error,
            }));
        }
        table.push(Value::Object(row));
    }
    spec.summary(json!({"dim": d, "runs": runs, "final_loss_table": table}))
}
