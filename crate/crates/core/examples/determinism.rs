//! Run the same spec twice and diff the outputs, ignoring wall-clock fields.

use f2csa::experiment::{self, compare_outputs, ExperimentKind, ExperimentSpec};

fn main() -> f2csa::Result<()> {
    let root = std::env::temp_dir().join("f2csa_determinism");
    let mut spec = ExperimentSpec::for_kind(ExperimentKind::Convergence);
    spec.dims = vec![20];
    spec.iterations = Some(300);
    for name in ["a", "b"] {
        spec.out_dir = Some(root.join(name));
        experiment::run(&spec)?;
    }
    let diffs = compare_outputs(&root.join("a"), &root.join("b"))?;
    if diffs.is_empty() {
        println!("reruns agree on every non-timing field");
    } else {
        diffs.iter().for_each(|d| println!("{d}"));
    }
    Ok(())
}
