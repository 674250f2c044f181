use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde_json::{json, Value};

use f2csa::experiment::{self, ExperimentKind, ExperimentSpec, Mode};
use f2csa::lower_level::{spd_solve, SpdConfig};
use f2csa::penalty::{hypergradient, PenaltyConfig};
use f2csa::verification::{probe_point, EXACT_TOL};
use f2csa::{BilevelProblem, NoiseStream, ProblemDocument, QuadraticInstance, Result};

#[derive(Parser)]
#[command(name = "f2csa", version, about = "Penalty-based bilevel optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Loss trajectories of the penalty method and the implicit baseline.
    Convergence(Common),
    /// Per-iteration wall-clock against dimension.
    Scaling(Common),
    /// Bias or variance probe of the hypergradient oracle.
    Probe {
        #[arg(long, value_parser = parse_probe_kind)]
        kind: ExperimentKind,
        #[command(flatten)]
        common: Common,
    },
    /// Solve the lower level at the probe point and compare with the exact solver.
    SolveLl(Point),
    /// One hypergradient estimate at the probe point, with the exact value.
    Hypergrad(Point),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Faithful,
    Calibrated,
}

#[derive(Args)]
struct Common {
    /// Problem dimension(s), comma separated.
    #[arg(long, value_delimiter = ',')]
    dim: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    ng: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Outer iterations.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// JSON spec whose fields override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct Point {
    #[arg(long, default_value_t = 5)]
    dim: usize,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0.2)]
    alpha: f64,
    #[arg(long, default_value_t = 1)]
    ng: usize,
    /// Lower-level KKT tolerance for `solve-ll`.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Problem document to load instead of generating from `--dim`/`--seeds`.
    #[arg(long)]
    problem: Option<PathBuf>,
    /// Also write the result to this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_probe_kind(s: &str) -> std::result::Result<ExperimentKind, String> {
    match s.parse::<ExperimentKind>() {
        Ok(k @ (ExperimentKind::BiasProbe | ExperimentKind::VarianceProbe)) => Ok(k),
        Ok(_) => Err("probe kind must be bias or variance".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn build_spec(kind: ExperimentKind, c: &Common) -> Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::for_kind(kind);
    if let Some(d) = &c.dim {
        spec.dims = d.clone();
    }
    if let Some(s) = &c.seeds {
        spec.seeds = s.clone();
    }
    if let Some(v) = c.sigma {
        spec.noise_sigma = v;
    }
    if let Some(v) = c.alpha {
        spec.alpha = v;
    }
    if let Some(v) = c.ng {
        spec.n_g = Some(v);
        spec.probe.bias_n_g = v;
    }
    if let Some(m) = c.mode {
        spec.mode = match m {
            ModeArg::Faithful => Mode::Faithful,
            ModeArg::Calibrated => Mode::Calibrated,
        };
    }
    if c.iterations.is_some() {
        spec.iterations = c.iterations;
    }
    spec.out_dir = Some(c.out.clone());
    if let Some(path) = &c.config {
        let overrides: Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        spec = spec.merge_json(&overrides)?;
    }
    Ok(spec)
}

fn load_instance(p: &Point) -> Result<QuadraticInstance> {
    match &p.problem {
        Some(path) => QuadraticInstance::from_document(&ProblemDocument::from_json(
            &std::fs::read_to_string(path)?,
        )?),
        None => Ok(QuadraticInstance::generate(p.dim, p.dim, p.seeds[0], p.sigma)),
    }
}

fn vec_json(v: &DVector<f64>) -> Value {
    json!(v.iter().collect::<Vec<_>>())
}

fn point_command(p: &Point, hyper: bool) -> Result<Value> {
    let inst = load_instance(p)?;
    let seed = p.seeds[0];
    let x = probe_point(inst.upper_dim(), seed);
    let exact = inst.exact_lower_solve(&x, EXACT_TOL).ok();
    let out = if hyper {
        let cfg = PenaltyConfig::new(p.alpha).with_n_g(p.ng);
        let est = hypergradient(&inst, &x, &cfg, &NoiseStream::new(seed))?;
        let reference = inst.clone().with_noise(0.0).exact_hypergradient(&x, EXACT_TOL).ok();
        json!({
            "x": vec_json(&x),
            "estimate": vec_json(&est.grad),
            "exact": reference.as_ref().map(vec_json),
            "error_norm": reference.map(|r| (&est.grad - r).norm()),
            "sample_variance": est.sample_variance,
            "diagnostics": est.diagnostics,
        })
    } else {
        let cfg = SpdConfig::for_problem(&inst, p.tol);
        let sol = spd_solve(&inst, &x, &cfg, &mut NoiseStream::new(seed), None)?;
        json!({
            "x": vec_json(&x),
            "y": vec_json(&sol.y),
            "lambda": vec_json(&sol.lambda),
            "kkt_residual": sol.kkt_residual,
            "iterations": sol.iterations,
            "exact_y": exact.as_ref().map(|e| vec_json(&e.y)),
            "distance_to_exact": exact.map(|e| (&sol.y - e.y).norm()),
        })
    };
    if let Some(dir) = &p.out {
        std::fs::create_dir_all(dir)?;
        let name = if hyper { "hypergrad.json" } else { "solve_ll.json" };
        std::fs::write(dir.join(name), serde_json::to_string_pretty(&out)?)?;
    }
    Ok(out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Convergence(c) => build_spec(ExperimentKind::Convergence, c).and_then(|s| experiment::run(&s)),
        Command::Scaling(c) => build_spec(ExperimentKind::Scaling, c).and_then(|s| experiment::run(&s)),
        Command::Probe { kind, common } => build_spec(*kind, common).and_then(|s| experiment::run(&s)),
        Command::SolveLl(p) => point_command(p, false),
        Command::Hypergrad(p) => point_command(p, true),
    };
    match result {
        Ok(v) => {
            let shown = match &cli.command {
                Command::SolveLl(_) | Command::Hypergrad(_) => &v,
                _ => &v["results"],
            };
            // A closed pipe (e.g. `| head`) is not an error.
            let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(shown).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
