use f2csa::lower_level::{estimate_duals_from_primal, spd_solve, Averaging, SpdConfig};
use f2csa::problem::LinearConstraints;
use f2csa::quadratic::QuadraticParts;
use f2csa::verification::EXACT_TOL;
use f2csa::{BilevelProblem, Error, NoiseStream, QuadraticInstance};
use nalgebra::{dmatrix, dvector, DVector};
use proptest::prelude::*;

fn scalar(c_l: f64) -> QuadraticInstance {
    QuadraticInstance::from_parts(
        &QuadraticParts {
            n: 1,
            m: 1,
            q_u: vec![1.0],
            q_l: vec![1.0],
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
fn clamped_scalar_dual_matches_primal_fit() {
    let inst = scalar(2.0);
    let x = DVector::zeros(1);
    let cfg = SpdConfig::for_problem(&inst, 1e-10);
    let sol = spd_solve(&inst, &x, &cfg, &mut NoiseStream::new(0), None).unwrap();
    assert!((sol.y[0] + 1.0).abs() < 1e-9);
    let fit = estimate_duals_from_primal(&inst, &x, &sol.y, 1e-6).unwrap();
    // Lower bound row is `m + 0`; multiplier 1 from y + 2 − λ = 0 at y = −1.
    assert!((fit[1] - 1.0).abs() < 1e-8);
    assert!((sol.lambda[1] - fit[1]).abs() < 1e-8);
}

#[test]
fn duplicate_rows_report_licq_violation() {
    // Two copies of y ≥ −1 on a 1-d problem; both active at y = −1.
    let cons = LinearConstraints::new(dmatrix![0.0; 0.0], dmatrix![1.0; 1.0], dvector![1.0, 1.0]).unwrap();
    let inst = scalar(2.0);
    let y = dvector![-1.0];
    let x = DVector::zeros(1);
    let h = cons.values(&x, &y).unwrap();
    assert_eq!(h, dvector![0.0, 0.0]);
    let dup = DupRows { inner: inst, cons };
    match estimate_duals_from_primal(&dup, &x, &y, 1e-8) {
        Err(Error::LicqViolation { rows: 2, rank: 1 }) => {}
        other => panic!("expected LICQ violation, got {other:?}"),
    }
}

/// A quadratic instance with its box replaced by custom rows.
struct DupRows {
    inner: QuadraticInstance,
    cons: LinearConstraints,
}

impl BilevelProblem for DupRows {
    fn upper_dim(&self) -> usize {
        self.inner.upper_dim()
    }
    fn lower_dim(&self) -> usize {
        self.inner.lower_dim()
    }
    fn constraints(&self) -> &LinearConstraints {
        &self.cons
    }
    fn upper_set(&self) -> &f2csa::UpperSet {
        self.inner.upper_set()
    }
    fn noise_sigma(&self) -> f64 {
        0.0
    }
    fn curvature(&self) -> f2csa::problem::Curvature {
        self.inner.curvature()
    }
    fn f_value(&self, x: &DVector<f64>, y: &DVector<f64>, s: Option<&mut NoiseStream>) -> f64 {
        self.inner.f_value(x, y, s)
    }
    fn g_value(&self, x: &DVector<f64>, y: &DVector<f64>, s: Option<&mut NoiseStream>) -> f64 {
        self.inner.g_value(x, y, s)
    }
    fn grad_f(&self, x: &DVector<f64>, y: &DVector<f64>, s: Option<&mut NoiseStream>) -> f2csa::problem::GradPair {
        self.inner.grad_f(x, y, s)
    }
    fn grad_g(&self, x: &DVector<f64>, y: &DVector<f64>, s: Option<&mut NoiseStream>) -> f2csa::problem::GradPair {
        self.inner.grad_g(x, y, s)
    }
}

#[test]
fn iterations_grow_linearly_in_log_tolerance() {
    let inst = QuadraticInstance::generate(5, 5, 3, 0.0);
    let x = NoiseStream::new(7).normal_vector(5);
    let counts: Vec<usize> = [1e-2, 1e-4, 1e-6]
        .iter()
        .map(|&tol| {
            let cfg = SpdConfig::for_problem(&inst, tol);
            spd_solve(&inst, &x, &cfg, &mut NoiseStream::new(0), None).unwrap().iterations
        })
        .collect();
    let (d1, d2) = ((counts[1] - counts[0]) as f64, (counts[2] - counts[1]) as f64);
    assert!(d1 > 0.0 && d2 > 0.0, "{counts:?}");
    assert!(d2 / d1 > 0.5 && d2 / d1 < 2.0, "{counts:?}");
}

#[test]
fn residual_stays_near_running_minimum() {
    // The primal–dual map rotates, so the residual is not monotone; it stays
    // within 2x of its running minimum after burn-in and the minimum decays.
    for seed in 0..10 {
        let inst = QuadraticInstance::generate(5, 5, seed, 0.0);
        let x = NoiseStream::new(1000 + seed).normal_vector(5);
        let cfg = SpdConfig::for_problem(&inst, 1e-8);
        let mut log = vec![];
        spd_solve(&inst, &x, &cfg, &mut NoiseStream::new(0), Some(&mut log)).unwrap();
        let mut running = f64::INFINITY;
        for row in &log {
            if row.iter > 10 {
                assert!(row.residual <= 2.0 * running, "seed {seed} iter {}: {} vs {running}", row.iter, row.residual);
            }
            running = running.min(row.residual);
        }
        assert!(running <= 1e-8);
    }
}

#[test]
fn noisy_solve_lands_near_exact() {
    let inst = QuadraticInstance::generate(5, 5, 1, 0.01);
    let exact = inst.clone().with_noise(0.0);
    let x = NoiseStream::new(3).normal_vector(5);
    let want = exact.exact_lower_solve(&x, EXACT_TOL).unwrap();
    let cfg = SpdConfig::for_problem(&inst, 1e-6);
    assert_eq!(cfg.averaging, Averaging::TailAverage);
    let sol = spd_solve(&inst, &x, &cfg, &mut NoiseStream::new(4), None).unwrap();
    assert!((&sol.y - &want.y).norm() < 0.01);
    assert!(sol.lambda.iter().all(|&l| l >= 0.0));
}

#[test]
fn noisy_solve_is_reproducible() {
    let inst = QuadraticInstance::generate(4, 6, 2, 0.05);
    let x = DVector::from_element(4, 0.3);
    let cfg = SpdConfig {
        max_iters: 200,
        ..SpdConfig::for_problem(&inst, 1e-6)
    };
    let a = spd_solve(&inst, &x, &cfg, &mut NoiseStream::new(9), None).unwrap();
    let b = spd_solve(&inst, &x, &cfg, &mut NoiseStream::new(9), None).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matches_exact_solver(seed in 0u64..1000, scale in 0.1f64..3.0) {
        let inst = QuadraticInstance::generate(5, 5, seed, 0.0);
        let x = NoiseStream::new(seed + 1).normal_vector(5) * scale;
        let tol = 1e-6;
        let cfg = SpdConfig::for_problem(&inst, tol);
        let sol = spd_solve(&inst, &x, &cfg, &mut NoiseStream::new(0), None).unwrap();
        let exact = inst.exact_lower_solve(&x, EXACT_TOL).unwrap();
        prop_assert!((&sol.y - &exact.y).norm() <= 3.0 * tol);
    }

    #[test]
    fn duals_nonnegative_and_complementary(seed in 0u64..1000, sigma in prop_oneof![Just(0.0), 0.001f64..0.05]) {
        let inst = QuadraticInstance::generate(4, 4, seed, sigma);
        let x = NoiseStream::new(seed + 2).normal_vector(4) * 2.0;
        let tol = 1e-5;
        let cfg = SpdConfig { max_iters: if sigma > 0.0 { 400 } else { 200_000 }, ..SpdConfig::for_problem(&inst, tol) };
        let sol = spd_solve(&inst, &x, &cfg, &mut NoiseStream::new(seed), None).unwrap();
        prop_assert!(sol.lambda.iter().all(|&l| l >= 0.0));
        let h = inst.constraints().values(&x, &sol.y).unwrap();
        let comp: f64 = sol.lambda.iter().zip(h.iter()).map(|(l, hi)| l * (-hi).max(0.0)).sum();
        if sigma == 0.0 {
            prop_assert!(comp <= tol * (1.0 + sol.lambda.norm()));
        } else {
            // Tail averaging leaves an O(σ) floor.
            prop_assert!(comp <= 10.0 * sigma * (1.0 + sol.lambda.norm()));
        }
    }
}
