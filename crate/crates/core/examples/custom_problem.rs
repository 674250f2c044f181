//! Plug a hand-written problem into the oracle and the outer loop. The
//! constraint couples both levels, `y ≥ x − 1`, so the feasible set moves
//! with `x`.
//!
//! f(x, y) = ½x² + x + ½y² + xy,  g(x, y) = ½y² + y + xy.
//! For x > −0.5 the bound is active, y*(x) = x − 1 and F'(x) = 4x − 1.

use f2csa::outer::{calibrate, run};
use f2csa::penalty::{hypergradient, PenaltyConfig};
use f2csa::problem::{Curvature, GradPair};
use f2csa::{BilevelProblem, LinearConstraints, NoiseStream, UpperSet};
use nalgebra::{dmatrix, dvector, DVector};

struct Coupled {
    constraints: LinearConstraints,
    upper: UpperSet,
    sigma: f64,
}

impl Coupled {
    fn new(sigma: f64) -> Self {
        Self {
            // h = x − y − 1 ≤ 0
            constraints: LinearConstraints::new(dmatrix![1.0], dmatrix![1.0], dvector![1.0]).unwrap(),
            upper: UpperSet::Free,
            sigma,
        }
    }

    fn jitter(&self, noise: Option<&mut NoiseStream>) -> f64 {
        noise.map_or(0.0, |s| self.sigma * s.normal())
    }
}

impl BilevelProblem for Coupled {
    fn upper_dim(&self) -> usize {
        1
    }
    fn lower_dim(&self) -> usize {
        1
    }
    fn constraints(&self) -> &LinearConstraints {
        &self.constraints
    }
    fn upper_set(&self) -> &UpperSet {
        &self.upper
    }
    fn noise_sigma(&self) -> f64 {
        self.sigma
    }
    fn curvature(&self) -> Curvature {
        Curvature { mu_g: 1.0, c_g: 1.0, c_f: 1.0 }
    }
    fn f_value(&self, x: &DVector<f64>, y: &DVector<f64>, noise: Option<&mut NoiseStream>) -> f64 {
        let (x, y) = (x[0], y[0]);
        0.5 * x * x + x + 0.5 * y * y + x * y + self.jitter(noise) * y
    }
    fn g_value(&self, x: &DVector<f64>, y: &DVector<f64>, noise: Option<&mut NoiseStream>) -> f64 {
        let (x, y) = (x[0], y[0]);
        0.5 * y * y + y + x * y + self.jitter(noise) * y
    }
    fn grad_f(&self, x: &DVector<f64>, y: &DVector<f64>, noise: Option<&mut NoiseStream>) -> GradPair {
        GradPair {
            x: dvector![x[0] + 1.0 + y[0]],
            y: dvector![y[0] + x[0] + self.jitter(noise)],
        }
    }
    fn grad_g(&self, x: &DVector<f64>, y: &DVector<f64>, noise: Option<&mut NoiseStream>) -> GradPair {
        GradPair {
            x: dvector![y[0]],
            y: dvector![y[0] + 1.0 + x[0] + self.jitter(noise)],
        }
    }
}

fn mean_estimate(problem: &Coupled, x: f64, cfg: &PenaltyConfig, draws: u64) -> f2csa::Result<f64> {
    let mut acc = 0.0;
    for r in 0..draws {
        acc += hypergradient(problem, &dvector![x], cfg, &NoiseStream::new(r))?.grad[0];
    }
    Ok(acc / draws as f64)
}

fn main() -> f2csa::Result<()> {
    let problem = Coupled::new(0.0);
    let x = dvector![0.3];
    for alpha in [0.4, 0.2, 0.1, 0.05] {
        let est = hypergradient(&problem, &x, &PenaltyConfig::new(alpha), &NoiseStream::new(0))?;
        println!("alpha {alpha:<5} estimate {:+.5}  exact {:+.5}", est.grad[0], 4.0 * x[0] - 1.0);
    }

    // With noise the lower-level solution sits O(δ) from the boundary, which
    // is wider than the default σ_h ramp (τδ = δ²), so ρ switches on and off
    // between draws. A ramp of width δ and a longer SPD run keep it on.
    let noisy = Coupled::new(0.01);
    let default = PenaltyConfig::new(0.1);
    let mut widened = default.clone();
    widened.tau_scale = 1.0 / widened.delta;
    widened.ll_max_iters = 400;
    for xv in [0.06, 0.3, 1.0] {
        println!(
            "sigma 0.01, x = {xv}: mean estimate {:+.4} (default ramp), {:+.4} (ramp δ), exact {:+.4}",
            mean_estimate(&noisy, xv, &default, 50)?,
            mean_estimate(&noisy, xv, &widened, 50)?,
            4.0 * xv - 1.0
        );
    }

    // Minimizer of F on x > −0.5 is x = 0.25.
    let (mut outer, mut penalty) = calibrate(0.1, 0.05, 4.0, 0.01, 1.0)?;
    penalty.tau_scale = 1.0 / penalty.delta;
    penalty.ll_max_iters = 400;
    outer.iterations = outer.block_len() * 40;
    outer.eta = 0.05;
    outer.x0 = Some(vec![1.0]);
    let trace = run(&noisy, &outer, &penalty, &NoiseStream::new(1), None)?;
    let last = trace.blocks.last().map(|b| b.x_bar[0]).unwrap_or(f64::NAN);
    println!("outer loop: last block average x = {last:.4} (minimizer 0.25)");
    Ok(())
}
