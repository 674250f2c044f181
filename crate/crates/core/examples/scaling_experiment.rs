//! Per-iteration cost against dimension for both methods, with fitted
//! power-law exponents.
//!
//! cargo run --release --example scaling_experiment -- [iterations] [out_dir]

use f2csa::experiment::{self, ExperimentKind, ExperimentSpec};

fn main() -> f2csa::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations: usize = args.next().map_or(25, |s| s.parse().expect("iterations"));
    let out = args.next().map_or_else(|| std::env::temp_dir().join("f2csa_scaling"), Into::into);
    let mut spec = ExperimentSpec::for_kind(ExperimentKind::Scaling);
    spec.iterations = Some(iterations);
    spec.out_dir = Some(out);
    let summary = experiment::run(&spec)?;
    for m in summary["results"]["medians"].as_array().into_iter().flatten() {
        println!(
            "d = {:>4}  {:<18} {:.4} s/iter",
            m["dim"],
            m["method"].as_str().unwrap_or("?"),
            m["median_per_iter_s"].as_f64().unwrap_or(f64::NAN)
        );
    }
    for row in summary["results"]["rows"].as_array().into_iter().flatten() {
        if let Some(err) = row["error"].as_str() {
            println!("d = {} {}: {err}", row["dim"], row["method"]);
        }
    }
    println!("exponents: {}", summary["results"]["exponents"]);
    Ok(())
}
