use std::time::Instant;

use nalgebra::DVector;
use serde_json::{json, Value};

use super::convergence::{baseline_config, run_baseline};
use super::output::{fmt_float, fmt_opt, write_csv};
use super::{ExperimentSpec, Method};
use crate::error::Result;
use crate::outer;
use crate::quadratic::QuadraticInstance;
use crate::rng::NoiseStream;
use crate::verification::fit_slope;

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Fixed outer-iteration budget per (dim, method, seed); records wall-clock
/// per iteration and fits `log(median time)` against `log(dim)` per method.
pub fn run_scaling(spec: &ExperimentSpec) -> Result<Value> {
    let dir = spec.out_dir()?.to_path_buf();
    let mut rows = vec![];
    let mut csv_rows = vec![];
    let mut medians = vec![];
    let mut exponents = serde_json::Map::new();
    let mut per_method: Vec<(Method, Vec<(f64, f64)>)> =
        spec.methods.iter().map(|&m| (m, vec![])).collect();
    for &d in &spec.dims {
        let mut times: Vec<Vec<f64>> = vec![vec![]; spec.methods.len()];
        for &seed in &spec.seeds {
            let inst = QuadraticInstance::generate(d, d, seed, spec.noise_sigma);
            let exact = inst.clone().with_noise(0.0);
            let (outer_cfg, penalty) = spec.configs(&inst, seed)?;
            let x0 = DVector::zeros(d);
            for (mi, &method) in spec.methods.iter().enumerate() {
                let start = Instant::now();
                let (final_x, iterations, error) = match method {
                    Method::F2csa => {
                        match outer::run(&inst, &outer_cfg, &penalty, &NoiseStream::new(seed).fork(1), None) {
                            Ok(t) => (t.rows.last().map(|r| r.x.clone()), t.rows.len(), t.error),
                            Err(e) => (None, 0, Some(e.to_string())),
                        }
                    }
                    Method::ImplicitBaseline => {
                        let bc = baseline_config(&inst, &penalty, &spec.baseline);
                        let t = run_baseline(
                            &inst,
                            &x0,
                            outer_cfg.iterations,
                            &spec.baseline,
                            &bc,
                            &NoiseStream::new(seed).fork(2),
                            0,
                            None,
                        );
                        (t.x_out.clone(), t.rows.len(), t.error)
                    }
                };
                let total_s = start.elapsed().as_secs_f64();
                let per_iter_s = (iterations > 0 && error.is_none()).then(|| total_s / iterations as f64);
                if let Some(p) = per_iter_s {
                    times[mi].push(p);
                }
                let f_final = final_x.and_then(|x| exact.f_true(&x, 1e-10).ok());
                csv_rows.push(vec![
                    d.to_string(),
                    method.name().to_string(),
                    seed.to_string(),
                    iterations.to_string(),
                    fmt_opt(per_iter_s),
                    fmt_float(total_s),
                    fmt_opt(f_final),
                ]);
                rows.push(json!({
                    "dim": d,
                    "method": method.name(),
                    "seed": seed,
                    "iterations": iterations,
                    "per_iter_s": per_iter_s,
                    "total_s": total_s,
                    "f_final": f_final.filter(|v| v.is_finite()),
                    "error": error,
                }));
            }
        }
        for (mi, &method) in spec.methods.iter().enumerate() {
            if let Some(m) = median(times[mi].clone()) {
                medians.push(json!({"dim": d, "method": method.name(), "median_per_iter_s": m}));
                per_method[mi].1.push(((d as f64).ln(), m.ln()));
            }
        }
    }
    for (method, pts) in &per_method {
        let (xs, ys): (Vec<f64>, Vec<f64>) = pts.iter().cloned().unzip();
        exponents.insert(method.name().into(), json!(fit_slope(&xs, &ys)));
    }
    write_csv(
        &dir.join("scaling.csv"),
        &spec.comments(None)?,
        &["dim", "method", "seed", "iterations", "per_iter_s", "total_s", "f_final"],
        &csv_rows,
    )?;
    spec.summary(json!({"rows": rows, "medians": medians, "exponents": exponents}))
}
