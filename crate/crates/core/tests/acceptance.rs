//! Acceptance suite. Runs every criterion in sequence, prints one line per
//! criterion and fails at the end if any did not pass.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::time::Instant;

use f2csa::experiment::{self, compare_outputs, ExperimentKind, ExperimentSpec};
use f2csa::lower_level::{spd_solve, SpdConfig};
use f2csa::outer::{self, calibrate, clip, max_block_spread, smoothed_gaps, RunTrace};
use f2csa::penalty::{sigma_h, sigma_lambda, PenaltyConfig};
use f2csa::verification::{
    bias_probe, fit_slope, mse_check, probe_point, strictness_margin, variance_probe,
    BiasVarianceReport, EXACT_TOL, STRICT_MARGIN,
};
use f2csa::{NoiseStream, QuadraticInstance};
use nalgebra::DVector;
use serde_json::Value;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
    seconds: f64,
}

fn check(name: &'static str, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let start = Instant::now();
    let (pass, detail) = f();
    let out = Outcome {
        name,
        pass,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    };
    println!(
        "{} {:<28} {:>7.1}s  {}",
        if out.pass { "PASS" } else { "FAIL" },
        out.name,
        out.seconds,
        out.detail
    );
    out
}

fn activation() -> (bool, String) {
    // Piecewise definitions written out independently of the library.
    let td = 0.2f64.powi(6);
    let eps = 1e-3;
    let ref_h = |z: f64| {
        if z < -td {
            0.0
        } else if z >= 0.0 {
            1.0
        } else {
            (td + z) / td
        }
    };
    let ref_l = |z: f64| {
        if z <= 0.0 {
            0.0
        } else if z >= eps {
            1.0
        } else {
            z / eps
        }
    };
    let n = 100_000;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let u = i as f64 / (n - 1) as f64;
        let zh = -2.0 * td + 3.0 * td * u;
        let zl = -eps + 3.0 * eps * u;
        worst = worst
            .max((sigma_h(zh, td) - ref_h(zh)).abs())
            .max((sigma_lambda(zl, eps) - ref_l(zl)).abs());
    }
    for z in [-td, 0.0] {
        worst = worst.max((sigma_h(z, td) - ref_h(z)).abs());
    }
    for z in [0.0, eps] {
        worst = worst.max((sigma_lambda(z, eps) - ref_l(z)).abs());
    }
    let gap = [
        (sigma_h(-td + 1e-18, td) - sigma_h(-td, td)).abs(),
        (sigma_h(0.0, td) - sigma_h(-1e-18, td)).abs(),
        (sigma_lambda(1e-18, eps) - sigma_lambda(0.0, eps)).abs(),
        (sigma_lambda(eps, eps) - sigma_lambda(eps - 1e-18, eps)).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    (
        worst == 0.0 && gap <= 1e-12,
        format!("max deviation {worst:.1e}, breakpoint gap {gap:.1e}"),
    )
}

fn r_squared(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let b = fit_slope(xs, ys).unwrap_or(0.0);
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let a = my - b * mx;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - a - b * x).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    }
}

fn lower_level_equivalence() -> (bool, String) {
    let tols = [1e-2, 1e-4, 1e-6];
    let mut worst_ratio: f64 = 0.0;
    let mut worst_r2: f64 = 1.0;
    for seed in 0..20 {
        let inst = QuadraticInstance::generate(5, 5, seed, 0.0);
        let x = NoiseStream::new(1000 + seed).normal_vector(5);
        let exact = inst.exact_lower_solve(&x, EXACT_TOL).unwrap();
        let mut iters = vec![];
        for &tol in &tols {
            let cfg = SpdConfig::for_problem(&inst, tol);
            let sol = spd_solve(&inst, &x, &cfg, &mut NoiseStream::new(seed), None).unwrap();
            iters.push(sol.iterations as f64);
            if tol == 1e-6 {
                worst_ratio = worst_ratio.max((&sol.y - &exact.y).norm() / (3.0 * tol));
            }
        }
        let lx: Vec<f64> = tols.iter().map(|t| (1.0 / t).ln()).collect();
        worst_r2 = worst_r2.min(r_squared(&lx, &iters));
    }
    (
        worst_ratio <= 1.0 && worst_r2 >= 0.9,
        format!("max |dy|/(3 tol) {worst_ratio:.3}, min R^2 {worst_r2:.4}"),
    )
}

fn exact_hypergradient_fd() -> (bool, String) {
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    let mut short = 0;
    for seed in 0..5 {
        let inst = QuadraticInstance::generate(5, 5, seed, 0.0);
        let mut stream = NoiseStream::new(500 + seed);
        let mut found = 0;
        for _ in 0..400 {
            if found == 20 {
                break;
            }
            let x = stream.normal_vector(5);
            if strictness_margin(&inst, &x).unwrap() < STRICT_MARGIN {
                continue;
            }
            found += 1;
            let g = inst.exact_hypergradient(&x, EXACT_TOL).unwrap();
            let fd = DVector::from_fn(5, |i, _| {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += step;
                xm[i] -= step;
                (inst.f_true(&xp, EXACT_TOL).unwrap() - inst.f_true(&xm, EXACT_TOL).unwrap())
                    / (2.0 * step)
            });
            worst = worst.max((&fd - &g).norm() / g.norm().max(1e-12));
        }
        if found < 20 {
            short += 1;
        }
    }
    (
        worst <= 1e-4 && short == 0,
        format!("5 instances x 20 strict points, max rel err {worst:.2e}"),
    )
}

fn bias_reports() -> Vec<BiasVarianceReport> {
    (0..3)
        .map(|seed| {
            let inst = QuadraticInstance::generate(5, 5, seed, 0.0);
            bias_probe(
                &inst,
                &probe_point(5, seed),
                &[0.4, 0.2, 0.1, 0.05],
                1,
                &PenaltyConfig::new(0.2).with_n_g(1),
                &NoiseStream::new(seed).fork(3),
            )
            .unwrap()
        })
        .collect()
}

fn variance_reports() -> Vec<BiasVarianceReport> {
    (0..3)
        .map(|seed| {
            let inst = QuadraticInstance::generate(5, 5, seed, 0.01);
            variance_probe(
                &inst,
                &probe_point(5, seed),
                0.2,
                &[16, 64, 256],
                200,
                &PenaltyConfig::new(0.2),
                &NoiseStream::new(seed).fork(3),
            )
            .unwrap()
        })
        .collect()
}

fn bias_slope(reports: &[BiasVarianceReport]) -> (bool, String) {
    let mut pass = true;
    let mut parts = vec![];
    for r in reports {
        let s = r.bias_slope.unwrap_or(f64::NAN);
        pass &= (0.6..=1.4).contains(&s) && r.bias_monotone() && r.cells.len() == 4;
        parts.push(format!("{s:.2}{}", if r.bias_monotone() { "" } else { "(non-monotone)" }));
    }
    (pass, format!("slopes {}", parts.join(", ")))
}

fn variance_ratios(reports: &[BiasVarianceReport]) -> (bool, String) {
    let mut pass = true;
    let mut parts = vec![];
    for r in reports {
        let get = |a, b| {
            r.variance_ratios
                .iter()
                .find(|v| v.n_g_small == a && v.n_g_large == b)
                .map(|v| v.ratio)
                .unwrap_or(f64::NAN)
        };
        let (r64, r256) = (get(16, 64), get(16, 256));
        pass &= (2.5..=6.0).contains(&r64) && (9.0..=28.0).contains(&r256);
        parts.push(format!("{r64:.2}/{r256:.1}"));
    }
    (pass, format!("16/64 and 16/256 per instance: {}", parts.join(", ")))
}

fn mse(bias: &[BiasVarianceReport], var: &[BiasVarianceReport]) -> (bool, String) {
    let mut pass = true;
    let mut worst: f64 = 0.0;
    let mut cells = 0;
    for (b, v) in bias.iter().zip(var) {
        let c = mse_check(&[b, v]);
        pass &= c.pass;
        cells += c.cells.len();
        for cell in &c.cells {
            worst = worst.max(cell.mse / (1.25 * cell.bound));
        }
    }
    (pass && cells > 0, format!("{cells} cells, max MSE/(1.25 bound) {worst:.3}"))
}

fn outer_invariants() -> (bool, String) {
    let zero_ok = clip(&DVector::zeros(3), 0.1) == DVector::zeros(3);
    let v = DVector::from_vec(vec![3.0, 4.0]);
    let clip_ok = (clip(&v, 1.0).norm() - 1.0).abs() < 1e-15 && clip(&v, 10.0) == v;
    let mut traces: Vec<(RunTrace, f64, f64)> = vec![];
    for (dim, sigma, seed) in [(10, 0.0, 0), (5, 0.01, 1), (20, 0.01, 2)] {
        let inst = QuadraticInstance::generate(dim, dim, seed, sigma);
        let (mut cfg, pen) = calibrate(0.2, 0.05, 1.0, sigma, 1.0).unwrap();
        cfg.iterations = 300;
        let tr = outer::run(&inst, &cfg, &pen, &NoiseStream::new(seed), None).unwrap();
        traces.push((tr, cfg.clip_radius, cfg.goldstein_delta));
    }
    let mut pass = zero_ok && clip_ok;
    let mut worst_step: f64 = 0.0;
    let mut worst_spread: f64 = 0.0;
    for (tr, d, delta) in &traces {
        let step = tr.rows.iter().map(|r| r.norm_delta).fold(0.0, f64::max);
        let spread = max_block_spread(tr);
        let md = tr.block_len as f64 * d;
        pass &= step <= d * (1.0 + 1e-12) && spread <= md * (1.0 + 1e-12) && md <= delta * (1.0 + 1e-12);
        pass &= !tr.blocks.is_empty() && tr.error.is_none();
        worst_step = worst_step.max(step / d);
        worst_spread = worst_spread.max(spread / delta);
    }
    (
        pass,
        format!("{} traces, max |step|/D {worst_step:.3}, max spread/delta {worst_spread:.3}, clip(0) = 0", traces.len()),
    )
}

fn convergence_parity(dir: &std::path::Path) -> (bool, String) {
    let mut spec = ExperimentSpec::for_kind(ExperimentKind::Convergence);
    spec.out_dir = Some(dir.to_path_buf());
    let summary = experiment::run(&spec).unwrap();
    let runs = summary["results"]["runs"].as_array().unwrap();
    let get = |seed: u64, method: &str, key: &str| -> f64 {
        runs.iter()
            .find(|r| r["seed"] == seed && r["method"] == method)
            .and_then(|r| r[key].as_f64())
            .unwrap_or(f64::NAN)
    };
    let mut pass = true;
    let mut parts = vec![];
    for seed in [0u64, 1, 2] {
        let fa = get(seed, "f2csa", "f_final");
        let fb = get(seed, "implicit_baseline", "f_final");
        let f0 = get(seed, "f2csa", "f_initial");
        let fref = get(seed, "f2csa", "f_reference");
        let rel = (fa - fb).abs() / fb.abs();
        let literal = |f: f64| f0 - f >= 0.5 * f0.abs();
        let closure = |f: f64| (f0 - f) / (f0 - fref);
        pass &= rel <= 0.1 && literal(fa) && literal(fb) && closure(fa) >= 0.5 && closure(fb) >= 0.5;
        parts.push(format!(
            "seed {seed}: {fa:.4} vs {fb:.4} (rel {rel:.3}, gap closed {:.2}/{:.2})",
            closure(fa),
            closure(fb)
        ));
    }
    (pass, parts.join("; "))
}

fn stationarity_trend() -> (bool, String) {
    let mut pass = true;
    let mut parts = vec![];
    for seed in [0u64, 1, 2] {
        let inst = QuadraticInstance::generate(10, 10, seed, 0.0);
        let (mut cfg, pen) = calibrate(0.2, 0.05, 1.0, 0.0, 1.0).unwrap();
        cfg.iterations = 2000;
        cfg.seed = seed;
        let tr = outer::run(&inst, &cfg, &pen, &NoiseStream::new(seed), None).unwrap();
        let gaps = smoothed_gaps(&tr, 5);
        let (first, last) = (gaps[0], *gaps.last().unwrap());
        pass &= last <= 0.5 * first;
        parts.push(format!("{first:.3} -> {last:.3}"));
    }
    (pass, format!("smoothed gap first -> last: {}", parts.join(", ")))
}

fn scaling(dir: &std::path::Path) -> (bool, String) {
    let mut spec = ExperimentSpec::for_kind(ExperimentKind::Scaling);
    spec.iterations = Some(25);
    spec.out_dir = Some(dir.to_path_buf());
    let summary = experiment::run(&spec).unwrap();
    let exp = &summary["results"]["exponents"];
    let ef = exp["f2csa"].as_f64().unwrap_or(f64::NAN);
    let eb = exp["implicit_baseline"].as_f64().unwrap_or(f64::NAN);
    (
        ef <= eb - 0.3,
        format!("exponents f2csa {ef:.2}, baseline {eb:.2} (gap {:.2})", eb - ef),
    )
}

fn determinism(conv_dir: &std::path::Path, root: &std::path::Path) -> (bool, String) {
    let rerun = |spec: &ExperimentSpec, name: &str| -> Vec<String> {
        let (a, b) = (root.join(format!("{name}_a")), root.join(format!("{name}_b")));
        for d in [&a, &b] {
            let mut s = spec.clone();
            s.out_dir = Some(d.clone());
            experiment::run(&s).unwrap();
        }
        compare_outputs(&a, &b).unwrap()
    };
    let mut diffs = vec![];
    // The full convergence spec is rerun against the parity run's output.
    let mut conv = ExperimentSpec::for_kind(ExperimentKind::Convergence);
    let again = root.join("convergence_rerun");
    conv.out_dir = Some(again.clone());
    experiment::run(&conv).unwrap();
    diffs.extend(compare_outputs(conv_dir, &again).unwrap());

    let mut scaling = ExperimentSpec::for_kind(ExperimentKind::Scaling);
    scaling.dims = vec![20, 40];
    scaling.iterations = Some(25);
    diffs.extend(rerun(&scaling, "scaling"));

    let mut bias = ExperimentSpec::for_kind(ExperimentKind::BiasProbe);
    bias.probe.trials = 1;
    diffs.extend(rerun(&bias, "bias"));

    let mut var = ExperimentSpec::for_kind(ExperimentKind::VarianceProbe);
    var.probe.trials = 20;
    diffs.extend(rerun(&var, "variance"));

    let pass = diffs.is_empty();
    let detail = if pass {
        "4 specs rerun, no non-timing differences".to_string()
    } else {
        diffs.join("; ")
    };
    (pass, detail)
}

#[test]
fn acceptance() {
    let root = tempfile::tempdir().unwrap();
    let conv_dir = root.path().join("convergence");
    let mut bias = vec![];
    let mut var = vec![];
    let outcomes = vec![
        check("activation", activation),
        check("lower_level_equivalence", lower_level_equivalence),
        check("exact_hypergradient_fd", exact_hypergradient_fd),
        check("bias_order_alpha", || {
            bias = bias_reports();
            bias_slope(&bias)
        }),
        check("variance_over_n_g", || {
            var = variance_reports();
            variance_ratios(&var)
        }),
        check("mse_bound", || mse(&bias, &var)),
        check("outer_invariants", outer_invariants),
        check("convergence_parity", || convergence_parity(&conv_dir)),
        check("stationarity_trend", stationarity_trend),
        check("scaling_shape", || scaling(&root.path().join("scaling"))),
        check("determinism", || determinism(&conv_dir, root.path())),
    ];
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.pass).map(|o| o.name).collect();
    let summary: Value = serde_json::json!({
        "passed": outcomes.len() - failed.len(),
        "total": outcomes.len(),
    });
    println!("acceptance: {summary}");
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
