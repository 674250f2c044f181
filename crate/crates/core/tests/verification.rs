use f2csa::penalty::{hypergradient, PenaltyConfig};
use f2csa::quadratic::QuadraticParts;
use f2csa::verification::{
    bias_probe, implicit_gradient_baseline, mse_check, probe_point, strictness_margin, variance_probe,
    BaselineConfig, EXACT_TOL, STRICT_MARGIN,
};
use f2csa::{NoiseStream, QuadraticInstance};
use nalgebra::DVector;

fn spread(samples: &[DVector<f64>]) -> f64 {
    let n = samples.len() as f64;
    let mut mean = DVector::zeros(samples[0].len());
    for s in samples {
        mean += s;
    }
    mean /= n;
    samples.iter().map(|s| (s - &mean).norm_squared()).sum::<f64>() / (n - 1.0)
}

#[test]
fn baseline_without_noise_is_exact() {
    for seed in 0..5 {
        let inst = QuadraticInstance::generate(5, 5, seed, 0.0);
        let x = probe_point(5, seed);
        if strictness_margin(&inst, &x).unwrap() < STRICT_MARGIN {
            continue;
        }
        let cfg = BaselineConfig::for_problem(&inst, 1e-10);
        let got = implicit_gradient_baseline(&inst, &x, &cfg, &NoiseStream::new(0)).unwrap();
        let want = inst.exact_hypergradient(&x, EXACT_TOL).unwrap();
        assert!((&got - &want).norm() <= 1e-7 * want.norm().max(1.0), "seed {seed}");
    }
}

#[test]
fn baseline_batch_reduces_variance() {
    let inst = QuadraticInstance::generate(5, 5, 0, 0.05);
    let x = probe_point(5, 0);
    let base = BaselineConfig::for_problem(&inst, 1e-6);
    let run = |batch: usize| {
        let cfg = BaselineConfig { batch, ..base };
        let stream = NoiseStream::new(batch as u64);
        let samples: Vec<DVector<f64>> = (0..400)
            .map(|t| implicit_gradient_baseline(&inst, &x, &cfg, &stream.fork(t)).unwrap())
            .collect();
        spread(&samples)
    };
    let ratio = run(1) / run(16);
    assert!(ratio > 8.0 && ratio < 32.0, "ratio {ratio}");
}

#[test]
fn baseline_and_penalty_oracle_agree() {
    let inst = QuadraticInstance::generate(5, 5, 1, 0.01);
    let exact_inst = inst.clone().with_noise(0.0);
    let x = probe_point(5, 1);
    let exact = exact_inst.exact_hypergradient(&x, EXACT_TOL).unwrap();
    let cfg = PenaltyConfig::new(0.05).with_n_g(16);
    let bc = BaselineConfig::for_problem(&inst, 1e-6);
    let trials = 40;
    let stream = NoiseStream::new(7);
    let mut pen = vec![];
    let mut imp = vec![];
    for t in 0..trials {
        pen.push(hypergradient(&inst, &x, &cfg, &stream.fork(2 * t)).unwrap().grad);
        imp.push(implicit_gradient_baseline(&inst, &x, &bc, &stream.fork(2 * t + 1)).unwrap());
    }
    let mean = |v: &[DVector<f64>]| v.iter().fold(DVector::zeros(5), |a, b| a + b) / v.len() as f64;
    let stderr = ((spread(&pen) + spread(&imp)) / trials as f64).sqrt();
    // Bias bound from the noiseless oracle at the same α.
    let bias = (hypergradient(&exact_inst, &x, &cfg, &stream).unwrap().grad - &exact).norm();
    let gap = (mean(&pen) - mean(&imp)).norm();
    assert!(gap <= 2.0 * (bias + 3.0 * stderr), "gap {gap} bias {bias} stderr {stderr}");
}

#[test]
fn noiseless_variance_probe_is_zero() {
    let inst = QuadraticInstance::generate(5, 5, 2, 0.0);
    let x = probe_point(5, 2);
    let r = variance_probe(&inst, &x, 0.2, &[16, 64], 30, &PenaltyConfig::new(0.2), &NoiseStream::new(0)).unwrap();
    assert_eq!(r.cells.len(), 2);
    assert!(r.cells.iter().all(|c| c.variance <= 1e-20));
}

#[test]
fn cell_mse_decomposes_into_variance_and_bias() {
    let inst = QuadraticInstance::generate(5, 5, 0, 0.05);
    let x = probe_point(5, 0);
    let r = bias_probe(&inst, &x, &[0.2, 0.1], 40, &PenaltyConfig::new(0.2), &NoiseStream::new(1)).unwrap();
    for c in &r.cells {
        let t = c.trials as f64;
        let identity = c.variance * (t - 1.0) / t + c.bias_norm * c.bias_norm;
        assert!((c.mse - identity).abs() <= 1e-12 * c.mse.max(1e-300));
    }
}

#[test]
fn more_trials_keep_bias_within_standard_error() {
    let inst = QuadraticInstance::generate(5, 5, 0, 0.05);
    let x = probe_point(5, 0);
    let cfg = PenaltyConfig::new(0.2);
    let few = bias_probe(&inst, &x, &[0.2], 30, &cfg, &NoiseStream::new(2)).unwrap();
    let many = bias_probe(&inst, &x, &[0.2], 120, &cfg, &NoiseStream::new(3)).unwrap();
    let (a, b) = (&few.cells[0], &many.cells[0]);
    assert!((a.bias_norm - b.bias_norm).abs() <= 2.0 * a.bias_stderr);
}

#[test]
fn clamped_instance_bias_is_order_alpha() {
    // Large c_l clamps every coordinate to the lower bound, so ∇F = ∇_x f.
    let inst = QuadraticInstance::from_parts(
        &QuadraticParts {
            n: 2,
            m: 2,
            q_u: vec![2.0, 0.3, 0.3, 1.5],
            q_l: vec![1.0, 0.2, 0.2, 1.2],
            p: vec![0.5, -0.4, 0.1, 0.7],
            p_y: vec![0.8, 0.1, 0.1, 0.6],
            c_u: vec![0.1, -0.2],
            c_l: vec![5.0, 5.0],
        },
        0.0,
    )
    .unwrap();
    let x = DVector::from_vec(vec![0.2, -0.1]);
    let sol = inst.exact_lower_solve(&x, EXACT_TOL).unwrap();
    assert_eq!(sol.y, DVector::from_element(2, -1.0));
    let r = bias_probe(&inst, &x, &[0.4, 0.2, 0.1, 0.05], 1, &PenaltyConfig::new(0.2), &NoiseStream::new(0)).unwrap();
    // Here the bias decays faster than α (slope ≈ 2); O(α) means bias/α
    // stays bounded along the grid.
    assert!(r.bias_monotone());
    let first = r.cells[0].bias_norm / r.cells[0].alpha;
    assert!(r.cells.iter().all(|c| c.bias_norm / c.alpha <= first * (1.0 + 1e-12)));
    assert!(r.bias_slope.unwrap() >= 0.6);
}

#[test]
fn degenerate_point_is_skipped_with_note() {
    // c_l = −1 at x = 0 puts the unconstrained minimizer on the bound with a
    // zero multiplier.
    let inst = QuadraticInstance::from_parts(
        &QuadraticParts {
            n: 1,
            m: 1,
            q_u: vec![1.0],
            q_l: vec![1.0],
            p: vec![1.0],
            p_y: vec![1.0],
            c_u: vec![1.0],
            c_l: vec![-1.0],
        },
        0.0,
    )
    .unwrap();
    let x = DVector::zeros(1);
    let r = bias_probe(&inst, &x, &[0.2], 1, &PenaltyConfig::new(0.2), &NoiseStream::new(0)).unwrap();
    assert!(r.cells.is_empty());
    assert!(r.notes[0].contains("skipped"));
    assert!(mse_check(&[&r]).cells.is_empty());
}
