//! Measure the oracle's bias against the penalty parameter and its variance
//! against the sample count, then check the mean-squared-error bound.

use f2csa::penalty::PenaltyConfig;
use f2csa::verification::{bias_probe, mse_check, probe_point, variance_probe};
use f2csa::{NoiseStream, QuadraticInstance};

fn main() -> f2csa::Result<()> {
    for seed in 0..3 {
        let x = probe_point(5, seed);
        let bias = bias_probe(
            &QuadraticInstance::generate(5, 5, seed, 0.0),
            &x,
            &[0.4, 0.2, 0.1, 0.05],
            1,
            &PenaltyConfig::new(0.2),
            &NoiseStream::new(seed),
        )?;
        let var = variance_probe(
            &QuadraticInstance::generate(5, 5, seed, 0.01),
            &x,
            0.2,
            &[16, 64, 256],
            200,
            &PenaltyConfig::new(0.2),
            &NoiseStream::new(seed),
        )?;
        let ratios: Vec<String> = var
            .variance_ratios
            .iter()
            .map(|r| format!("{}/{}: {:.2}", r.n_g_small, r.n_g_large, r.ratio))
            .collect();
        let check = mse_check(&[&bias, &var]);
        println!(
            "seed {seed}: bias slope {:.2} (monotone {}), variance ratios [{}], MSE bound {}",
            bias.bias_slope.unwrap_or(f64::NAN),
            bias.bias_monotone(),
            ratios.join(", "),
            if check.pass { "holds" } else { "violated" }
        );
    }
    Ok(())
}
