//! Generate a box-constrained quadratic instance, save it, and evaluate the
//! exact lower-level solution and hypergradient at a point.
//!
//! cargo run --example generate_instance -- [dim] [seed]

use f2csa::verification::{probe_point, strictness_margin, EXACT_TOL};
use f2csa::{ProblemDocument, QuadraticInstance};

fn main() -> f2csa::Result<()> {
    let mut args = std::env::args().skip(1);
    let dim: usize = args.next().map_or(5, |s| s.parse().expect("dim"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    let inst = QuadraticInstance::generate(dim, dim, seed, 0.01);
    println!("instance {} (mu_g = {:.3})", &inst.fingerprint()[..16], inst.mu_g());

    let path = std::env::temp_dir().join(format!("quadratic_d{dim}_seed{seed}.json"));
    std::fs::write(&path, inst.to_document().to_json()?)?;
    let loaded = QuadraticInstance::from_document(&ProblemDocument::from_json(&std::fs::read_to_string(&path)?)?)?;
    assert_eq!(loaded.fingerprint(), inst.fingerprint());
    println!("saved and reloaded {}", path.display());

    let exact = inst.with_noise(0.0);
    let x = probe_point(dim, seed);
    let sol = exact.exact_lower_solve(&x, EXACT_TOL)?;
    let clamped = sol.y.iter().filter(|v| v.abs() > 1.0 - 1e-9).count();
    println!("y*(x): {clamped} of {dim} coordinates on the box, KKT residual {:.1e}", sol.kkt_residual);
    println!("F(x) = {:.6}", exact.f_true(&x, EXACT_TOL)?);
    println!("strictness margin {:.2e}", strictness_margin(&exact, &x)?);
    let grad = exact.exact_hypergradient(&x, EXACT_TOL)?;
    println!("|grad F(x)| = {:.6}", grad.norm());
    Ok(())
}
