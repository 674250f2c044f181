use std::path::Path;
use std::process::Command;

use f2csa::experiment::output::{read_csv, validate_summary};
use f2csa::experiment::{self, compare_outputs, ExperimentKind, ExperimentSpec, Method};
use f2csa::Error;
use serde_json::Value;

fn small_convergence(dir: &Path) -> ExperimentSpec {
    let mut spec = ExperimentSpec::for_kind(ExperimentKind::Convergence);
    spec.dims = vec![6];
    spec.seeds = vec![0, 1];
    spec.iterations = Some(75);
    spec.out_dir = Some(dir.to_path_buf());
    spec
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_f2csa"))
}

#[test]
fn convergence_writes_traces_and_valid_summary() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_convergence(dir.path());
    let summary = experiment::run(&spec).unwrap();
    validate_summary(&summary).unwrap();
    assert_eq!(summary["results"]["runs"].as_array().unwrap().len(), 4);
    assert_eq!(summary["results"]["final_loss_table"].as_array().unwrap().len(), 2);
    for seed in [0, 1] {
        for method in ["f2csa", "implicit_baseline"] {
            let stem = format!("convergence_d6_seed{seed}_{method}");
            let (header, rows) = read_csv(&dir.path().join(format!("{stem}.csv"))).unwrap();
            assert_eq!(&header[..4], ["t", "s_t", "norm_delta", "norm_g"]);
            assert_eq!(rows.len(), 75);
            let meta: Value =
                serde_json::from_str(&std::fs::read_to_string(dir.path().join(format!("{stem}_meta.json"))).unwrap())
                    .unwrap();
            assert_eq!(meta["seed"], seed);
            assert!(meta["instance_hash"].as_str().unwrap().len() == 64);
        }
        assert!(dir.path().join(format!("convergence_d6_seed{seed}_f2csa_blocks.csv")).exists());
    }
    let text = std::fs::read_to_string(dir.path().join("convergence_d6_seed0_f2csa.csv")).unwrap();
    assert!(text.starts_with("# library_version"));
    assert!(text.lines().any(|l| l.starts_with("# spec")));
}

#[test]
fn reruns_match_outside_timing_columns() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    experiment::run(&small_convergence(a.path())).unwrap();
    experiment::run(&small_convergence(b.path())).unwrap();
    assert_eq!(compare_outputs(a.path(), b.path()).unwrap(), Vec::<String>::new());

    let mut other = small_convergence(b.path());
    other.seeds = vec![0, 2];
    let c = tempfile::tempdir().unwrap();
    other.out_dir = Some(c.path().to_path_buf());
    experiment::run(&other).unwrap();
    assert!(!compare_outputs(a.path(), c.path()).unwrap().is_empty());
}

#[test]
fn stride_beyond_horizon_records_endpoints_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = small_convergence(dir.path());
    spec.seeds = vec![0];
    spec.instrument_stride = 10_000;
    spec.methods = vec![Method::F2csa];
    experiment::run(&spec).unwrap();
    let (header, rows) = read_csv(&dir.path().join("convergence_d6_seed0_f2csa.csv")).unwrap();
    let col = header.iter().position(|h| h == "F_true").unwrap();
    assert_eq!(rows.len(), 75);
    let recorded: Vec<&str> = rows.iter().filter(|r| !r[col].is_empty()).map(|r| r[0].as_str()).collect();
    assert_eq!(recorded, vec!["75"]);
}

#[test]
fn empty_method_list_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = small_convergence(dir.path());
    spec.methods.clear();
    assert!(matches!(experiment::run(&spec), Err(Error::NoMethods)));
}

#[test]
fn single_dim_scaling_gives_one_row_per_method() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = ExperimentSpec::for_kind(ExperimentKind::Scaling);
    spec.dims = vec![10];
    spec.iterations = Some(5);
    spec.methods = vec![Method::F2csa];
    spec.out_dir = Some(dir.path().to_path_buf());
    let summary = experiment::run(&spec).unwrap();
    assert_eq!(summary["results"]["rows"].as_array().unwrap().len(), 1);
    let (_, rows) = read_csv(&dir.path().join("scaling.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    // A single point cannot fit an exponent.
    assert!(summary["results"]["exponents"]["f2csa"].is_null());
}

#[test]
fn probe_defaults_have_expected_cells() {
    let dir = tempfile::tempdir().unwrap();
    let mut bias = ExperimentSpec::for_kind(ExperimentKind::BiasProbe);
    bias.seeds = vec![0];
    bias.probe.trials = 1;
    bias.out_dir = Some(dir.path().join("bias"));
    let s = experiment::run(&bias).unwrap();
    assert_eq!(s["results"]["reports"][0]["report"]["cells"].as_array().unwrap().len(), 4);

    let mut var = ExperimentSpec::for_kind(ExperimentKind::VarianceProbe);
    var.seeds = vec![0];
    var.probe.trials = 30;
    var.out_dir = Some(dir.path().join("var"));
    let s = experiment::run(&var).unwrap();
    let report = &s["results"]["reports"][0]["report"];
    assert_eq!(report["cells"].as_array().unwrap().len(), 3);
    assert_eq!(report["variance_ratios"].as_array().unwrap().len(), 3);
}

#[test]
fn cli_point_commands_print_json() {
    let out = bin().args(["solve-ll", "--dim", "4", "--seeds", "2"]).output().unwrap();
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["distance_to_exact"].as_f64().unwrap() < 1e-6);

    let out = bin().args(["hypergrad", "--dim", "4", "--alpha", "0.1"]).output().unwrap();
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["estimate"].as_array().unwrap().len(), 4);
}

#[test]
fn cli_unknown_probe_kind_is_a_usage_error() {
    let out = bin().args(["probe", "--kind", "curvature"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown experiment kind"));
}

#[test]
fn cli_config_file_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("spec.json");
    std::fs::write(&cfg, r#"{"seeds": [3], "methods": ["implicit_baseline"], "iterations": 20}"#).unwrap();
    let out_dir = dir.path().join("run");
    let out = bin()
        .args(["convergence", "--dim", "5", "--seeds", "0,1", "--iterations", "500", "--out"])
        .arg(&out_dir)
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seeds"], serde_json::json!([3]));
    let (_, rows) = read_csv(&out_dir.join("convergence_d5_seed3_implicit_baseline.csv")).unwrap();
    assert_eq!(rows.len(), 20);
    assert!(!out_dir.join("convergence_d5_seed3_f2csa.csv").exists());
}

#[test]
fn cli_empty_methods_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("spec.json");
    std::fs::write(&cfg, r#"{"methods": []}"#).unwrap();
    let out = bin().arg("convergence").arg("--out").arg(dir.path()).arg("--config").arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no methods selected"));
}
