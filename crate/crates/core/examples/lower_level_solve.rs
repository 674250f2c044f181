//! Solve the constrained lower level with the primal–dual method, with and
//! without noise, and compare against the exact active-set solver.

use f2csa::lower_level::{spd_solve, SpdConfig};
use f2csa::verification::{probe_point, EXACT_TOL};
use f2csa::{NoiseStream, QuadraticInstance};

fn main() -> f2csa::Result<()> {
    let inst = QuadraticInstance::generate(8, 8, 1, 0.0);
    let x = probe_point(8, 1) * 2.0;
    let exact = inst.exact_lower_solve(&x, EXACT_TOL)?;

    println!("tol      iters  |y - y*|");
    for tol in [1e-2, 1e-4, 1e-6, 1e-8] {
        let cfg = SpdConfig::for_problem(&inst, tol);
        let sol = spd_solve(&inst, &x, &cfg, &mut NoiseStream::new(0), None)?;
        println!("{tol:.0e}  {:>5}  {:.2e}", sol.iterations, (&sol.y - &exact.y).norm());
    }

    let mut log = vec![];
    let cfg = SpdConfig::for_problem(&inst, 1e-6);
    spd_solve(&inst, &x, &cfg, &mut NoiseStream::new(0), Some(&mut log))?;
    for row in log.iter().step_by(10).take(6) {
        println!("iter {:>3}  residual {:.3e}  |lambda| {:.3}", row.iter, row.residual, row.norm_lambda);
    }

    let noisy = inst.with_noise(0.01);
    let cfg = SpdConfig::for_problem(&noisy, 1e-6);
    let sol = spd_solve(&noisy, &x, &cfg, &mut NoiseStream::new(1), None)?;
    println!(
        "noisy: {} iterations, tail-averaged |y - y*| = {:.2e}, residual {:.2e}",
        sol.iterations,
        (&sol.y - &exact.y).norm(),
        sol.kkt_residual
    );
    Ok(())
}
