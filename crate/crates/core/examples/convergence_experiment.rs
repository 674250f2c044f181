//! Loss trajectories for the penalty method and the implicit baseline,
//! written as CSV traces plus a summary.
//!
//! cargo run --release --example convergence_experiment -- [out_dir]

use f2csa::experiment::{self, ExperimentKind, ExperimentSpec};

fn main() -> f2csa::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("f2csa_convergence"), Into::into);
    let mut spec = ExperimentSpec::for_kind(ExperimentKind::Convergence);
    spec.out_dir = Some(out.clone());
    let summary = experiment::run(&spec)?;
    for run in summary["results"]["runs"].as_array().into_iter().flatten() {
        println!(
            "seed {} {:<18} F(x0) {:+.4}  final {:+.4}  reference {:+.4}",
            run["seed"],
            run["method"].as_str().unwrap_or("?"),
            run["f_initial"].as_f64().unwrap_or(f64::NAN),
            run["f_final"].as_f64().unwrap_or(f64::NAN),
            run["f_reference"].as_f64().unwrap_or(f64::NAN),
        );
    }
    println!("outputs in {}", out.display());
    Ok(())
}
