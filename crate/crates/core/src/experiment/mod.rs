//! Benchmark harness: convergence trajectories, dimension scaling, and the
//! verification probes, writing CSV traces and schema-checked summaries.
//!
//! Every output embeds the spec (without the output directory), the library
//! version and the seeds. Rerunning a spec reproduces every file except the
//! wall-clock columns; [`compare_outputs`] checks exactly that.

mod convergence;
pub mod output;
mod probe;
mod scaling;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::outer::{calibrate, OuterConfig};
use crate::penalty::PenaltyConfig;
use crate::quadratic::QuadraticInstance;

pub use convergence::{reference_minimum, run_baseline, run_convergence};
pub use probe::run_probe;
pub use scaling::run_scaling;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Convergence,
    Scaling,
    BiasProbe,
    VarianceProbe,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Convergence => "convergence",
            Self::Scaling => "scaling",
            Self::BiasProbe => "bias_probe",
            Self::VarianceProbe => "variance_probe",
        }
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convergence" => Ok(Self::Convergence),
            "scaling" => Ok(Self::Scaling),
            "bias_probe" | "bias" => Ok(Self::BiasProbe),
            "variance_probe" | "variance" => Ok(Self::VarianceProbe),
            other => Err(Error::InvalidConfig(format!(
                "unknown experiment kind {other:?} (expected convergence, scaling, bias_probe or variance_probe)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    F2csa,
    ImplicitBaseline,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::F2csa => "f2csa",
            Self::ImplicitBaseline => "implicit_baseline",
        }
    }
}

/// Step-size source for the penalty method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Fixed `η = faithful_eta`; the other parameters are calibrated.
    Faithful,
    /// `η` from the calibration rates.
    Calibrated,
}

/// Projected SGD on the implicit-gradient baseline:
/// `x ← proj(x − β_t g_t)` with `β_t = step0 / sqrt(1 + t/decay)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSpec {
    pub step0: f64,
    pub decay: f64,
    pub batch: usize,
    /// Multipliers above this mark a row active.
    pub active_tol: f64,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        Self {
            step0: 0.1,
            decay: 100.0,
            batch: 16,
            active_tol: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSpec {
    pub alpha_grid: Vec<f64>,
    /// `α` of the variance probe.
    pub alpha: f64,
    pub n_g_list: Vec<usize>,
    pub trials: usize,
    /// `N_g` used by the bias probe.
    pub bias_n_g: usize,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            alpha_grid: vec![0.4, 0.2, 0.1, 0.05],
            alpha: 0.2,
            n_g_list: vec![16, 64, 256],
            trials: 200,
            bias_n_g: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub dims: Vec<usize>,
    pub seeds: Vec<u64>,
    pub noise_sigma: f64,
    pub methods: Vec<Method>,
    pub mode: Mode,
    pub alpha: f64,
    /// Samples per oracle call; calibrated from `σ` and `α` when absent.
    pub n_g: Option<usize>,
    /// Outer iterations `T`; 2000 for convergence, 50 for scaling when absent.
    pub iterations: Option<usize>,
    pub epsilon: f64,
    pub goldstein_delta: f64,
    /// `L_F` used for calibration; estimated from the instance when absent.
    pub lipschitz: Option<f64>,
    pub faithful_eta: f64,
    pub instrument_stride: usize,
    /// Penalty-oracle settings for the penalty method; `alpha` and `n_g`
    /// above take precedence.
    pub penalty: Option<PenaltyConfig>,
    pub baseline: BaselineSpec,
    pub probe: ProbeSpec,
    #[serde(skip)]
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::Convergence,
            dims: vec![50],
            seeds: vec![0, 1, 2],
            noise_sigma: 0.01,
            methods: vec![Method::F2csa, Method::ImplicitBaseline],
            mode: Mode::Calibrated,
            alpha: 0.2,
            n_g: None,
            iterations: None,
            epsilon: 0.2,
            goldstein_delta: 0.05,
            lipschitz: Some(1.0),
            faithful_eta: 1e-5,
            instrument_stride: 10,
            penalty: None,
            baseline: BaselineSpec::default(),
            probe: ProbeSpec::default(),
            out_dir: None,
        }
    }
}

impl ExperimentSpec {
    /// Defaults for `kind`.
    pub fn for_kind(kind: ExperimentKind) -> Self {
        let base = Self {
            kind,
            ..Self::default()
        };
        match kind {
            ExperimentKind::Convergence => base,
            ExperimentKind::Scaling => Self {
                dims: vec![100, 200, 400, 700, 1000],
                seeds: vec![0],
                ..base
            },
            ExperimentKind::BiasProbe => Self {
                dims: vec![5],
                noise_sigma: 0.0,
                ..base
            },
            ExperimentKind::VarianceProbe => Self {
                dims: vec![5],
                ..base
            },
        }
    }

    /// Overlays the fields present in a JSON object onto this spec.
    pub fn merge_json(&self, overrides: &Value) -> Result<Self> {
        let mut base = serde_json::to_value(self)?;
        merge(&mut base, overrides);
        let mut out: Self = serde_json::from_value(base)?;
        out.out_dir = self.out_dir.clone();
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.dims.contains(&0) {
            return Err(Error::InvalidConfig("dims must be a nonempty list of positive sizes".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must be nonempty".into()));
        }
        if matches!(self.kind, ExperimentKind::Convergence | ExperimentKind::Scaling)
            && self.methods.is_empty()
        {
            return Err(Error::NoMethods);
        }
        if !(self.noise_sigma >= 0.0) || !(self.alpha > 0.0) {
            return Err(Error::InvalidConfig("noise_sigma must be >= 0 and alpha > 0".into()));
        }
        if let Some(dir) = &self.out_dir {
            ensure_writable(dir)?;
        }
        Ok(())
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("output directory not set".into()))
    }

    /// Outer and penalty settings for one instance.
    pub fn configs(&self, inst: &QuadraticInstance, seed: u64) -> Result<(OuterConfig, PenaltyConfig)> {
        let lipschitz = self
            .lipschitz
            .unwrap_or_else(|| inst.lipschitz_estimate(1.0));
        let (mut outer, calibrated) =
            calibrate(self.epsilon, self.goldstein_delta, lipschitz, self.noise_sigma, 1.0)?;
        let default_t = match self.kind {
            ExperimentKind::Scaling => 50,
            _ => 2000,
        };
        outer.iterations = self.iterations.unwrap_or(default_t);
        outer.seed = seed;
        outer.instrument_stride = self.instrument_stride;
        if self.mode == Mode::Faithful {
            outer.eta = self.faithful_eta;
        }
        let template = self.penalty.clone().unwrap_or_else(|| PenaltyConfig::new(self.alpha));
        let penalty = template
            .with_alpha(self.alpha)
            .with_n_g(self.n_g.unwrap_or(calibrated.n_g));
        Ok((outer, penalty))
    }

    fn comments(&self, seed: Option<u64>) -> Result<Vec<(String, String)>> {
        let mut c = vec![
            ("library_version".to_string(), output::LIBRARY_VERSION.to_string()),
            ("spec".to_string(), serde_json::to_string(self)?),
            ("seeds".to_string(), serde_json::to_string(&self.seeds)?),
        ];
        if let Some(s) = seed {
            c.push(("seed".to_string(), s.to_string()));
        }
        Ok(c)
    }

    fn summary(&self, results: Value) -> Result<Value> {
        let doc = serde_json::json!({
            "schema_version": output::SCHEMA_VERSION,
            "kind": self.kind.name(),
            "library_version": output::LIBRARY_VERSION,
            "spec": serde_json::to_value(self)?,
            "seeds": self.seeds,
            "results": results,
        });
        output::validate_summary(&doc)?;
        output::write_json(&self.out_dir()?.join("summary.json"), &doc)?;
        Ok(doc)
    }
}

fn merge(base: &mut Value, overrides: &Value) {
    match (base, overrides) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn ensure_writable(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let probe = dir.join(".write_check");
    std::fs::write(&probe, b"")?;
    std::fs::remove_file(&probe)?;
    Ok(())
}

/// Runs the experiment described by `spec` and returns its summary.
pub fn run(spec: &ExperimentSpec) -> Result<Value> {
    spec.validate()?;
    match spec.kind {
        ExperimentKind::Convergence => run_convergence(spec),
        ExperimentKind::Scaling => run_scaling(spec),
        ExperimentKind::BiasProbe | ExperimentKind::VarianceProbe => run_probe(spec),
    }
}

/// CSV columns and summary keys that hold wall-clock measurements.
pub const TIMING_FIELDS: &[&str] = &[
    "elapsed_s",
    "per_iter_s",
    "total_s",
    "wall_s",
    "median_per_iter_s",
    "exponents",
];

/// Lists differences between two output directories, ignoring
/// [`TIMING_FIELDS`].
pub fn compare_outputs(a: &Path, b: &Path) -> Result<Vec<String>> {
    let names = |d: &Path| -> Result<BTreeSet<String>> {
        let mut s = BTreeSet::new();
        for e in std::fs::read_dir(d)? {
            s.insert(e?.file_name().to_string_lossy().into_owned());
        }
        Ok(s)
    };
    let (na, nb) = (names(a)?, names(b)?);
    let mut diffs: Vec<String> = na
        .symmetric_difference(&nb)
        .map(|n| format!("{n}: present in only one directory"))
        .collect();
    for name in na.intersection(&nb) {
        let (pa, pb) = (a.join(name), b.join(name));
        if name.ends_with(".csv") {
            let (ha, ra) = output::read_csv(&pa)?;
            let (hb, rb) = output::read_csv(&pb)?;
            if ha != hb || ra.len() != rb.len() {
                diffs.push(format!("{name}: header or row count differs"));
                continue;
            }
            let keep: Vec<usize> = (0..ha.len())
                .filter(|&i| !TIMING_FIELDS.contains(&ha[i].as_str()))
                .collect();
            for (i, (x, y)) in ra.iter().zip(&rb).enumerate() {
                if keep.iter().any(|&j| x[j] != y[j]) {
                    diffs.push(format!("{name}: row {i} differs"));
                    break;
                }
            }
            let comments = |p: &Path| -> Result<Vec<String>> {
                Ok(std::fs::read_to_string(p)?
                    .lines()
                    .filter(|l| l.starts_with('#'))
                    .map(str::to_string)
                    .collect())
            };
            if comments(&pa)? != comments(&pb)? {
                diffs.push(format!("{name}: header comments differ"));
            }
        } else if name.ends_with(".json") {
            let mut va: Value = serde_json::from_str(&std::fs::read_to_string(&pa)?)?;
            let mut vb: Value = serde_json::from_str(&std::fs::read_to_string(&pb)?)?;
            strip_timing(&mut va);
            strip_timing(&mut vb);
            if va != vb {
                diffs.push(format!("{name}: contents differ"));
            }
        } else if std::fs::read(&pa)? != std::fs::read(&pb)? {
            diffs.push(format!("{name}: bytes differ"));
        }
    }
    Ok(diffs)
}

fn strip_timing(v: &mut Value) {
    match v {
        Value::Object(m) => {
            for k in TIMING_FIELDS {
                m.remove(*k);
            }
            m.values_mut().for_each(strip_timing);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_timing),
        _ => {}
    }
}
