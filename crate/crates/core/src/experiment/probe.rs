use serde_json::{json, Value};

use super::output::{fmt_float, write_csv, write_json};
use super::{ExperimentKind, ExperimentSpec};
use crate::error::Result;
use crate::penalty::PenaltyConfig;
use crate::quadratic::QuadraticInstance;
use crate::rng::NoiseStream;
use crate::verification::{bias_probe, mse_check, probe_point, variance_probe, BiasVarianceReport};

const PROBE_STREAM: u64 = 3;

/// Runs the bias or variance probe on every (seed, dim) instance at its
/// probe point and checks the MSE bound across all cells.
pub fn run_probe(spec: &ExperimentSpec) -> Result<Value> {
    let dir = spec.out_dir()?.to_path_buf();
    let template = spec
        .penalty
        .clone()
        .unwrap_or_else(|| PenaltyConfig::new(spec.alpha));
    let mut reports: Vec<(u64, usize, BiasVarianceReport)> = vec![];
    for &seed in &spec.seeds {
        for &d in &spec.dims {
            let inst = QuadraticInstance::generate(d, d, seed, spec.noise_sigma);
            let x = probe_point(d, seed);
            let stream = NoiseStream::new(seed).fork(PROBE_STREAM);
            let report = match spec.kind {
                ExperimentKind::BiasProbe => bias_probe(
                    &inst,
                    &x,
                    &spec.probe.alpha_grid,
                    spec.probe.trials,
                    &template.clone().with_n_g(spec.probe.bias_n_g),
                    &stream,
                )?,
                _ => variance_probe(
                    &inst,
                    &x,
                    spec.probe.alpha,
                    &spec.probe.n_g_list,
                    spec.probe.trials,
                    &template,
                    &stream,
                )?,
            };
            let stem = format!("{}_d{d}_seed{seed}", spec.kind.name());
            let rows: Vec<Vec<String>> = report
                .cells
                .iter()
                .map(|c| {
                    vec![
                        fmt_float(c.alpha),
                        c.n_g.to_string(),
                        c.trials.to_string(),
                        fmt_float(c.bias_norm),
                        fmt_float(c.bias_stderr),
                        fmt_float(c.variance),
                        fmt_float(c.mse),
                        fmt_float(c.single_sample_variance),
                    ]
                })
                .collect();
            write_csv(
                &dir.join(format!("{stem}.csv")),
                &spec.comments(Some(seed))?,
                &["alpha", "n_g", "trials", "bias_norm", "bias_stderr", "variance", "mse", "single_sample_variance"],
                &rows,
            )?;
            write_json(&dir.join(format!("{stem}.json")), &serde_json::to_value(&report)?)?;
            reports.push((seed, d, report));
        }
    }
    let refs: Vec<&BiasVarianceReport> = reports.iter().map(|(_, _, r)| r).collect();
    let check = mse_check(&refs);
    let list: Vec<Value> = reports
        .iter()
        .map(|(seed, d, r)| json!({"seed": seed, "dim": d, "report": r}))
        .collect();
    spec.summary(json!({"reports": list, "mse_check": check}))
}
