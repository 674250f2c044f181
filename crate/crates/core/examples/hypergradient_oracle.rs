//! Penalty hypergradient estimates for a range of penalty parameters,
//! compared with the exact hypergradient.

use f2csa::penalty::{hypergradient, PenaltyConfig};
use f2csa::verification::{probe_point, EXACT_TOL};
use f2csa::{NoiseStream, QuadraticInstance};

fn main() -> f2csa::Result<()> {
    let inst = QuadraticInstance::generate(5, 5, 0, 0.0);
    let x = probe_point(5, 0);
    let exact = inst.exact_hypergradient(&x, EXACT_TOL)?;

    println!("alpha   error      ll iters  pen iters");
    for alpha in [0.4, 0.2, 0.1, 0.05] {
        let cfg = PenaltyConfig::new(alpha);
        let est = hypergradient(&inst, &x, &cfg, &NoiseStream::new(0))?;
        let d = est.diagnostics;
        println!(
            "{alpha:<6}  {:.3e}  {:>8}  {:>9}",
            (&est.grad - &exact).norm(),
            d.inner_iters_ll,
            d.inner_iters_pen
        );
    }

    let noisy = inst.with_noise(0.01);
    for n_g in [1, 16, 256] {
        let cfg = PenaltyConfig::new(0.2).with_n_g(n_g);
        let est = hypergradient(&noisy, &x, &cfg, &NoiseStream::new(1))?;
        println!(
            "noisy N_g = {n_g:>3}: error {:.3e}, per-sample variance {:.2e}",
            (&est.grad - &exact).norm(),
            est.sample_variance
        );
    }
    Ok(())
}
