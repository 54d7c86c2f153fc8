//! Batch front door: load a run configuration (JSON file and/or flags),
//! execute one of the solve / residual / sensitivity / contraction /
//! benchmark pipelines, and emit JSON + CSV artifacts into an output
//! directory. No interactive mode; identical configuration and seed
//! produce byte-identical summary.json files.

use crate::drivers::TimeGrid;
use crate::error::{Error, Result};
use crate::forward::initial_cloud;
use crate::master::{residual, write_residual_csv, DecouplingField, FdSteps, FieldConfig};
use crate::model::{
    CoefficientSet, InitialLaw, JumpAtom, JumpLinearCoeffs, JumpMeasure, ProblemSpec, TerminalKind,
};
use crate::oracle::{BenchmarkFamily, FamilyId};
use crate::picard::{contraction_probe, picard_solve, picard_solve_pinned};
use crate::regression::RegressionBasis;
use crate::sensitivity::{solve_dmu, solve_dx_with_flow, DmuConfig};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(
    name = "jumpfield",
    version,
    about = "Particle solver for McKean-Vlasov FBSDEs with jumps: decoupling \
             field extraction, derivatives, and master-equation residuals"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the particle system and report V at the initial time
    Solve(SolveArgs),
    /// Evaluate the master-equation residual at sampled points
    Residual(ResidualArgs),
    /// Compute x- and measure-derivatives of the decoupling field
    Sensitivity(RunArgs),
    /// Report Picard contraction diagnostics and random-pair probes
    Contraction(RunArgs),
    /// Check a benchmark family against its closed form (pass/fail table)
    Benchmark(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON configuration file; flags override its fields
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Benchmark family id
    #[arg(long, value_parser = ["A", "B", "C", "Q", "a", "b", "c", "q"])]
    pub family: Option<String>,
    /// Particles of the self-interacting cloud
    #[arg(long = "N")]
    pub n: Option<usize>,
    /// Copies of the pinned system
    #[arg(long = "M")]
    pub m: Option<usize>,
    /// Time steps over [0, T]
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Picard convergence tolerance
    #[arg(long)]
    pub tol: Option<f64>,
    /// Picard iteration cap
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Data-parallel width cap (fallback: JUMPFIELD_THREADS)
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory for summary.json and CSV artifacts
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Also export the forward paths (step, particle, coordinates)
    #[arg(long)]
    pub export_paths: bool,
}

#[derive(Debug, Args)]
pub struct ResidualArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Number of (t, x) evaluation points
    #[arg(long)]
    pub points: Option<usize>,
}

// ---------------------------------------------------------------------
// JSON configuration file
// ---------------------------------------------------------------------

#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
struct FileConfig {
    family: Option<String>,
    problem: Option<ProblemConfig>,
    numerics: NumericsConfig,
    fd: FdConfig,
    evaluation: EvalConfig,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct ProblemConfig {
    horizon: f64,
    coefficients: CoeffConfig,
    jump: JumpConfig,
    initial_law: LawConfig,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct CoeffConfig {
    dim: usize,
    #[serde(default)]
    drift_y_slope: f64,
    #[serde(default)]
    drift_mean_slope: f64,
    #[serde(default)]
    sigma: f64,
    #[serde(default)]
    jump_scale: f64,
    #[serde(default)]
    driver_kappa: f64,
    terminal: String,
    #[serde(default = "one")]
    terminal_scale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct JumpConfig {
    atoms: Vec<AtomConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct AtomConfig {
    mark: Vec<f64>,
    weight: f64,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, tag = "type")]
enum LawConfig {
    Point { x: Vec<f64> },
    Gaussian { mean: Vec<f64>, std_dev: Vec<f64> },
    Atoms { points: Vec<Vec<f64>> },
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
struct NumericsConfig {
    particles: usize,
    copies: usize,
    steps: usize,
    seed: u64,
    tol: f64,
    max_iter: usize,
    basis_degree: usize,
}

impl Default for NumericsConfig {
    fn default() -> Self {
        Self {
            particles: 20_000,
            copies: 2_000,
            steps: 50,
            seed: 7,
            tol: 1e-6,
            max_iter: 8,
            basis_degree: 3,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
struct FdConfig {
    eps_x: f64,
    eps_t: Option<f64>,
    eps_v: f64,
    subsample_cap: usize,
}

impl Default for FdConfig {
    fn default() -> Self {
        let fd = FdSteps::default();
        Self {
            eps_x: fd.eps_x,
            eps_t: fd.eps_t,
            eps_v: fd.eps_v,
            subsample_cap: fd.subsample_cap,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
struct EvalConfig {
    /// Evaluation time of the field pipelines.
    t: f64,
    /// Pin point x; also the point initial law of family specs.
    x: Vec<f64>,
    /// Probe points v of the measure derivative.
    probes: Vec<Vec<f64>>,
    /// Number of residual evaluation points.
    points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            t: 0.0,
            x: vec![0.0],
            probes: vec![vec![-1.0], vec![-0.5], vec![0.0], vec![0.5], vec![1.0]],
            points: 10,
        }
    }
}

fn config_error(pointer: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        pointer: pointer.into(),
        message: message.into(),
    }
}

fn load_config(path: &Path) -> Result<FileConfig> {
    let text = fs::read_to_string(path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let pointer = format!("/{}", e.path().to_string().replace('.', "/"));
        config_error(pointer, e.inner().to_string())
    })
}

// ---------------------------------------------------------------------
// Resolution: config file + flags -> a runnable plan
// ---------------------------------------------------------------------

struct Resolved {
    spec: ProblemSpec,
    family: Option<BenchmarkFamily>,
    particles: usize,
    copies: usize,
    steps: usize,
    seed: u64,
    tol: f64,
    max_iter: usize,
    basis: RegressionBasis,
    fd: FdSteps,
    t: f64,
    x: Vec<f64>,
    probes: Vec<Vec<f64>>,
    points: usize,
    out: PathBuf,
}

impl Resolved {
    fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(0.0, self.spec.horizon, self.steps)
    }

    fn field_config(&self) -> FieldConfig {
        FieldConfig {
            particles: self.particles,
            copies: self.copies,
            steps: self.steps,
            time_copies: (self.copies * 10).max(20_000),
            seed: self.seed,
            basis: self.basis.clone(),
            tol: self.tol,
            max_iter: self.max_iter,
            dmu: DmuConfig::default(),
        }
    }
}

fn terminal_kind(name: &str) -> Result<TerminalKind> {
    match name {
        "state" => Ok(TerminalKind::State),
        "statePlusMean" => Ok(TerminalKind::StatePlusMean),
        "statePlusSecondMoment" => Ok(TerminalKind::StatePlusSecondMoment),
        other => Err(config_error(
            "/problem/coefficients/terminal",
            format!(
                "unknown terminal '{other}'; expected state, statePlusMean \
                 or statePlusSecondMoment"
            ),
        )),
    }
}

fn build_problem(p: &ProblemConfig) -> Result<ProblemSpec> {
    if !(p.horizon > 0.0 && p.horizon.is_finite()) {
        return Err(config_error("/problem/horizon", "horizon must be positive"));
    }
    if p.coefficients.dim == 0 {
        return Err(config_error(
            "/problem/coefficients/dim",
            "dim must be at least 1",
        ));
    }
    let atoms: Vec<JumpAtom> = p
        .jump
        .atoms
        .iter()
        .map(|a| JumpAtom {
            mark: a.mark.clone(),
            weight: a.weight,
        })
        .collect();
    let jump = if atoms.is_empty() {
        JumpMeasure::none()
    } else {
        JumpMeasure::new(atoms)
            .map_err(|e| config_error("/problem/jump/atoms", e.to_string()))?
    };
    let maps = JumpLinearCoeffs {
        dim: p.coefficients.dim,
        drift_y_slope: p.coefficients.drift_y_slope,
        drift_mean_slope: p.coefficients.drift_mean_slope,
        sigma_const: p.coefficients.sigma,
        jump_scale: p.coefficients.jump_scale,
        driver_kappa: p.coefficients.driver_kappa,
        terminal: terminal_kind(&p.coefficients.terminal)?,
        terminal_scale: p.coefficients.terminal_scale,
    };
    let cert = maps.certificate(&jump);
    let initial_law = match &p.initial_law {
        LawConfig::Point { x } => InitialLaw::Point { x: x.clone() },
        LawConfig::Gaussian { mean, std_dev } => InitialLaw::Gaussian {
            mean: mean.clone(),
            std_dev: std_dev.clone(),
        },
        LawConfig::Atoms { points } => InitialLaw::Atoms {
            points: points.clone(),
        },
    };
    let spec = ProblemSpec {
        coeffs: CoefficientSet::new(std::sync::Arc::new(maps), cert, jump)
            .map_err(|e| config_error("/problem", e.to_string()))?,
        horizon: p.horizon,
        initial_law,
        pin: None,
    };
    spec.validate()
        .map_err(|e| config_error("/problem", e.to_string()))?;
    Ok(spec)
}

fn resolve(args: &RunArgs) -> Result<Resolved> {
    let file = match &args.config {
        Some(path) => load_config(path)?,
        None => FileConfig::default(),
    };
    let particles = args.n.unwrap_or(file.numerics.particles);
    let copies = args.m.unwrap_or(file.numerics.copies);
    let steps = args.steps.unwrap_or(file.numerics.steps);
    let seed = args.seed.unwrap_or(file.numerics.seed);
    let tol = args.tol.unwrap_or(file.numerics.tol);
    let max_iter = args.max_iter.unwrap_or(file.numerics.max_iter);
    if particles == 0 {
        return Err(config_error("/numerics/particles", "N must be at least 1"));
    }
    if copies == 0 {
        return Err(config_error("/numerics/copies", "M must be at least 1"));
    }
    if steps == 0 {
        return Err(config_error("/numerics/steps", "steps must be at least 1"));
    }
    if !(tol > 0.0) {
        return Err(config_error("/numerics/tol", "tol must be positive"));
    }
    if max_iter == 0 {
        return Err(config_error("/numerics/maxIter", "maxIter must be at least 1"));
    }
    if file.numerics.basis_degree == 0 {
        return Err(config_error(
            "/numerics/basisDegree",
            "basisDegree must be at least 1",
        ));
    }

    let family_name = args.family.clone().or_else(|| file.family.clone());
    let x = file.evaluation.x.clone();
    let (spec, family) = match (&family_name, &file.problem) {
        (Some(name), _) => {
            let id: FamilyId = name
                .parse()
                .map_err(|e: Error| config_error("/family", e.to_string()))?;
            let fam = BenchmarkFamily::new(id);
            (fam.problem_spec(&x), Some(fam))
        }
        (None, Some(p)) => (build_problem(p)?, None),
        (None, None) => {
            return Err(config_error(
                "/family",
                "either a family id or a problem table is required",
            ));
        }
    };
    if x.len() != spec.coeffs.dim {
        return Err(config_error(
            "/evaluation/x",
            format!("expected dimension {}", spec.coeffs.dim),
        ));
    }
    if !(0.0..=spec.horizon).contains(&file.evaluation.t) {
        return Err(config_error(
            "/evaluation/t",
            format!("t must lie in [0, {}]", spec.horizon),
        ));
    }

    Ok(Resolved {
        spec,
        family,
        particles,
        copies,
        steps,
        seed,
        tol,
        max_iter,
        basis: RegressionBasis::default().with_degree(file.numerics.basis_degree),
        fd: FdSteps {
            eps_x: file.fd.eps_x,
            eps_t: file.fd.eps_t,
            eps_v: file.fd.eps_v,
            subsample_cap: file.fd.subsample_cap,
        },
        t: file.evaluation.t,
        x,
        probes: file.evaluation.probes.clone(),
        points: file.evaluation.points,
        out: args.out.clone().unwrap_or_else(|| PathBuf::from("out")),
    })
}

/// Caps rayon's data-parallel width; results do not depend on the cap.
fn apply_threads(flag: Option<usize>) {
    let n = flag.or_else(|| {
        std::env::var("JUMPFIELD_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = n.filter(|&n| n > 0) {
        // a second invocation in-process keeps the first pool; harmless
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

fn write_summary(out: &Path, value: &serde_json::Value) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(out.join("summary.json"), text)?;
    Ok(())
}

fn write_artifact<F>(out: &Path, name: &str, fill: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> Result<()>,
{
    fs::create_dir_all(out)?;
    let mut buf = Vec::new();
    fill(&mut buf)?;
    fs::write(out.join(name), buf)?;
    Ok(())
}

// ---------------------------------------------------------------------
// Pipelines
// ---------------------------------------------------------------------

fn common_summary(r: &Resolved, command: &str) -> serde_json::Value {
    json!({
        "command": command,
        "seed": r.seed,
        "particles": r.particles,
        "copies": r.copies,
        "steps": r.steps,
        "tol": r.tol,
        "maxIter": r.max_iter,
        "horizon": r.spec.horizon,
        "evaluationT": r.t,
        "family": r.family.map(|f| format!("{:?}", f.id)),
    })
}

fn merge(mut base: serde_json::Value, extra: serde_json::Value) -> serde_json::Value {
    if let (Some(b), Some(e)) = (base.as_object_mut(), extra.as_object()) {
        for (k, v) in e {
            b.insert(k.clone(), v.clone());
        }
    }
    base
}

fn run_solve(args: &SolveArgs) -> Result<()> {
    let r = resolve(&args.run)?;
    let grid = r.grid()?;
    let sol = picard_solve(
        &r.spec, &grid, r.particles, r.seed, &r.basis, r.tol, r.max_iter,
    )?;
    let (v0, se) = sol.value_at_start();
    write_artifact(&r.out, "diagnostics.csv", |w| {
        use std::io::Write;
        writeln!(w, "iteration,norm,ratio")?;
        for (i, n) in sol.diagnostics.iteration_norms.iter().enumerate() {
            let ratio = if i == 0 {
                f64::NAN
            } else {
                sol.diagnostics.ratios[i - 1]
            };
            writeln!(w, "{},{n:.17e},{ratio:.17e}", i + 1)?;
        }
        Ok(())
    })?;
    if args.export_paths {
        write_artifact(&r.out, "paths.csv", |w| sol.paths.write_csv(w))?;
        write_artifact(&r.out, "backward.csv", |w| sol.backward.write_csv(w))?;
    }
    let summary = merge(
        common_summary(&r, "solve"),
        json!({
            "v0": v0,
            "v0StdErr": se,
            "converged": sol.diagnostics.converged,
            "iterations": sol.diagnostics.iteration_norms.len(),
            "ratios": sol.diagnostics.ratios,
            "i0Sq": sol.diagnostics.i0_sq,
            "aprioriC": sol.diagnostics.apriori_c,
            "warnings": sol.diagnostics.warnings,
        }),
    );
    write_summary(&r.out, &summary)
}

fn run_residual(args: &ResidualArgs) -> Result<()> {
    let r = resolve(&args.run)?;
    let points = args.points.unwrap_or(r.points).max(1);
    let field = DecouplingField::new(r.spec.clone(), r.field_config())?;
    let cloud = initial_cloud(&r.spec.initial_law, 64, r.seed)?;
    let dt = r.spec.horizon / r.steps as f64;
    let mut reports = Vec::with_capacity(points);
    for j in 0..points {
        // interior times (central time differences stay on the grid) and
        // a deterministic fan of pin points around the evaluation point
        let frac = 0.2 + 0.6 * j as f64 / points.max(2) as f64;
        let t = ((frac * r.steps as f64).round() * dt).clamp(dt, r.spec.horizon - dt);
        let spread = if points > 1 {
            -0.5 + j as f64 / (points - 1) as f64
        } else {
            0.0
        };
        let x: Vec<f64> = r.x.iter().map(|xi| xi + spread).collect();
        reports.push(residual(&field, &r.spec, t, &x, &cloud, &r.fd)?);
    }
    write_artifact(&r.out, "residual.csv", |w| write_residual_csv(&reports, w))?;
    let max_abs = reports
        .iter()
        .map(|rep| rep.total.abs())
        .fold(0.0f64, f64::max);
    let summary = merge(
        common_summary(&r, "residual"),
        json!({
            "points": points,
            "maxAbsResidual": max_abs,
            "totals": reports.iter().map(|rep| rep.total).collect::<Vec<_>>(),
        }),
    );
    write_summary(&r.out, &summary)
}

fn run_sensitivity(args: &RunArgs) -> Result<()> {
    let r = resolve(args)?;
    let grid = r.grid()?;
    let mv = picard_solve(
        &r.spec, &grid, r.particles, r.seed, &r.basis, r.tol, r.max_iter,
    )?;
    let flow = mv.flow();
    let pinned = picard_solve_pinned(
        &r.spec, &flow, &grid, &r.x, r.copies, r.seed, &r.basis, r.tol, r.max_iter,
    )?;
    let dx = solve_dx_with_flow(&pinned, &r.spec, &grid, &r.basis, Some(&flow))?;
    write_artifact(&r.out, "dx.csv", |w| dx.write_csv(&grid, w))?;

    let cfg = DmuConfig::default();
    let mut dmu_rows: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for v in &r.probes {
        if v.len() != r.spec.coeffs.dim {
            return Err(config_error(
                "/evaluation/probes",
                format!("probe dimension must be {}", r.spec.coeffs.dim),
            ));
        }
        let bundle = solve_dmu(&r.spec, &grid, &r.basis, &mv, &pinned, v, &cfg, r.seed)?;
        dmu_rows.push((v.clone(), bundle.dmu_y0));
    }
    write_artifact(&r.out, "dmu.csv", |w| {
        use std::io::Write;
        writeln!(w, "probe0,component,value")?;
        for (v, dmu) in &dmu_rows {
            for (k, val) in dmu.iter().enumerate() {
                writeln!(w, "{:.17e},{k},{val:.17e}", v[0])?;
            }
        }
        Ok(())
    })?;
    let summary = merge(
        common_summary(&r, "sensitivity"),
        json!({
            "x": r.x,
            "gradient": dx.gradient(),
            "dmuProbes": dmu_rows.iter().map(|(v, _)| v.clone()).collect::<Vec<_>>(),
            "dmuValues": dmu_rows.iter().map(|(_, d)| d.clone()).collect::<Vec<_>>(),
        }),
    );
    write_summary(&r.out, &summary)
}

fn run_contraction(args: &RunArgs) -> Result<()> {
    let r = resolve(args)?;
    let grid = r.grid()?;
    let sol = picard_solve(
        &r.spec, &grid, r.particles, r.seed, &r.basis, r.tol, r.max_iter,
    )?;
    let probes = contraction_probe(&r.spec, &grid, r.particles, r.seed, &r.basis, 8)?;
    write_artifact(&r.out, "probes.csv", |w| {
        use std::io::Write;
        writeln!(w, "pair,ratio")?;
        for (i, ratio) in probes.iter().enumerate() {
            writeln!(w, "{i},{ratio:.17e}")?;
        }
        Ok(())
    })?;
    let max_probe = probes.iter().copied().fold(0.0f64, f64::max);
    let summary = merge(
        common_summary(&r, "contraction"),
        json!({
            "converged": sol.diagnostics.converged,
            "iterationNorms": sol.diagnostics.iteration_norms,
            "ratios": sol.diagnostics.ratios,
            "i0Sq": sol.diagnostics.i0_sq,
            "aprioriC": sol.diagnostics.apriori_c,
            "probeRatios": probes,
            "maxProbeRatio": max_probe,
        }),
    );
    write_summary(&r.out, &summary)
}

fn run_benchmark(args: &RunArgs) -> Result<()> {
    let r = resolve(args)?;
    let fam = r.family.ok_or_else(|| {
        config_error("/family", "the benchmark command requires a family id")
    })?;
    let grid = r.grid()?;
    let sol = picard_solve(
        &r.spec, &grid, r.particles, r.seed, &r.basis, r.tol, r.max_iter,
    )?;
    let (v0, se) = sol.value_at_start();
    let cloud = initial_cloud(&r.spec.initial_law, 64, r.seed)?;
    let exact = fam.closed_form_v(0.0, r.x[0], &cloud);

    let flow = sol.flow();
    let pinned = picard_solve_pinned(
        &r.spec, &flow, &grid, &r.x, r.copies, r.seed, &r.basis, r.tol, r.max_iter,
    )?;
    let dx = solve_dx_with_flow(&pinned, &r.spec, &grid, &r.basis, Some(&flow))?;
    let dx0 = dx.gradient()[0];
    let dx_exact = fam.closed_form_dx_v(0.0);

    struct Check {
        name: &'static str,
        value: f64,
        target: f64,
        tolerance: f64,
    }
    let checks = vec![
        Check {
            name: "valueAtStart",
            value: v0,
            target: exact,
            tolerance: 0.02,
        },
        Check {
            name: "gradientAtStart",
            value: dx0,
            target: dx_exact,
            tolerance: 0.02,
        },
        Check {
            name: "maxPicardRatio",
            value: sol
                .diagnostics
                .ratios
                .iter()
                .copied()
                .fold(0.0f64, f64::max),
            target: 0.0,
            tolerance: 1.0,
        },
    ];
    let pass = checks
        .iter()
        .all(|c| (c.value - c.target).abs() <= c.tolerance);
    write_artifact(&r.out, "acceptance.csv", |w| {
        use std::io::Write;
        writeln!(w, "check,value,target,tolerance,pass")?;
        for c in &checks {
            writeln!(
                w,
                "{},{:.17e},{:.17e},{:.17e},{}",
                c.name,
                c.value,
                c.target,
                c.tolerance,
                (c.value - c.target).abs() <= c.tolerance
            )?;
        }
        Ok(())
    })?;
    let summary = merge(
        common_summary(&r, "benchmark"),
        json!({
            "v0": v0,
            "v0StdErr": se,
            "v0Exact": exact,
            "gradient": dx0,
            "gradientExact": dx_exact,
            "converged": sol.diagnostics.converged,
            "pass": pass,
        }),
    );
    write_summary(&r.out, &summary)?;
    if !pass {
        return Err(Error::structural(format!(
            "benchmark {:?} failed; see acceptance.csv",
            fam.id
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Structural(_) => "structural",
        Error::Evaluation { .. } => "evaluation",
        Error::Divergence { .. } => "divergence",
        Error::Regression(_) => "regression",
        Error::Capability(_) => "capability",
        Error::NonContraction { .. } => "nonContraction",
        Error::Config { .. } => "config",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

/// Executes a parsed command; artifacts land in the output directory.
pub fn run(cli: &Cli) -> Result<()> {
    let run_args = match &cli.command {
        Command::Solve(a) => &a.run,
        Command::Residual(a) => &a.run,
        Command::Sensitivity(a) => a,
        Command::Contraction(a) => a,
        Command::Benchmark(a) => a,
    };
    apply_threads(run_args.threads);
    match &cli.command {
        Command::Solve(a) => run_solve(a),
        Command::Residual(a) => run_residual(a),
        Command::Sensitivity(a) => run_sensitivity(a),
        Command::Contraction(a) => run_contraction(a),
        Command::Benchmark(a) => run_benchmark(a),
    }
}

/// Process entry: parses arguments, runs, and renders failures as
/// structured JSON on stderr with a nonzero exit status (2 for
/// configuration errors, 1 otherwise).
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let body = match &e {
                Error::Config { pointer, message } => json!({
                    "error": {
                        "kind": "config",
                        "pointer": pointer,
                        "message": message,
                    }
                }),
                other => json!({
                    "error": {
                        "kind": error_kind(other),
                        "message": other.to_string(),
                    }
                }),
            };
            eprintln!("{}", serde_json::to_string_pretty(&body).unwrap());
            if matches!(e, Error::Config { .. }) {
                2
            } else {
                1
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    fn parse(line: &[&str]) -> Cli {
        Cli::parse_from(line)
    }

    fn run_in(dir: &Path, line: &[&str]) -> Result<()> {
        let mut full: Vec<String> = line.iter().map(|s| s.to_string()).collect();
        full.push("--out".into());
        full.push(dir.to_string_lossy().into_owned());
        run(&Cli::parse_from(full))
    }

    #[test]
    fn solve_writes_summary_and_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        run_in(
            dir.path(),
            &[
                "jumpfield", "solve", "--family", "A", "--N", "2000", "--steps", "20",
                "--seed", "7",
            ],
        )
        .unwrap();
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap())
                .unwrap();
        assert_eq!(summary["command"], "solve");
        assert!((summary["v0"].as_f64().unwrap() - 0.25).abs() <= 0.02);
        assert!(summary["converged"].as_bool().unwrap());
        let diag = fs::read_to_string(dir.path().join("diagnostics.csv")).unwrap();
        assert!(diag.starts_with("iteration,norm,ratio"));
    }

    #[test]
    fn identical_seed_gives_byte_identical_summary() {
        let line = [
            "jumpfield", "solve", "--family", "B", "--N", "1500", "--steps", "15",
            "--seed", "21",
        ];
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        run_in(d1.path(), &line).unwrap();
        run_in(d2.path(), &line).unwrap();
        let a = fs::read(d1.path().join("summary.json")).unwrap();
        let b = fs::read(d2.path().join("summary.json")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn benchmark_family_a_passes() {
        let dir = tempfile::tempdir().unwrap();
        run_in(
            dir.path(),
            &[
                "jumpfield", "benchmark", "--family", "A", "--N", "3000", "--M", "1500",
                "--steps", "20", "--seed", "7",
            ],
        )
        .unwrap();
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap())
                .unwrap();
        assert_eq!(summary["pass"], true);
        let table = fs::read_to_string(dir.path().join("acceptance.csv")).unwrap();
        assert!(table.contains("valueAtStart"));
    }

    #[test]
    fn config_error_carries_json_pointer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(&path, r#"{"numerics": {"steps": -3}}"#).unwrap();
        let err = run_in(
            dir.path(),
            &["jumpfield", "solve", "--config", path.to_str().unwrap()],
        )
        .unwrap_err();
        match err {
            Error::Config { pointer, .. } => assert_eq!(pointer, "/numerics/steps"),
            other => panic!("expected config error, got {other}"),
        }
    }

    #[test]
    fn missing_problem_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = run_in(dir.path(), &["jumpfield", "solve", "--seed", "1"]).unwrap_err();
        match err {
            Error::Config { pointer, .. } => assert_eq!(pointer, "/family"),
            other => panic!("expected config error, got {other}"),
        }
    }

    #[test]
    fn custom_problem_table_solves() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("custom.json");
        fs::write(
            &path,
            r#"{
                "problem": {
                    "horizon": 0.25,
                    "coefficients": {"dim": 1, "sigma": 1.0, "jumpScale": 1.0,
                                     "terminal": "state"},
                    "jump": {"atoms": [{"mark": [1.0], "weight": 1.0}]},
                    "initialLaw": {"type": "point", "x": [0.0]}
                },
                "numerics": {"particles": 6000, "steps": 15, "seed": 3}
            }"#,
        )
        .unwrap();
        run_in(
            dir.path(),
            &["jumpfield", "solve", "--config", path.to_str().unwrap()],
        )
        .unwrap();
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap())
                .unwrap();
        // the custom table reproduces family A: V(0,0) = c lambda T
        assert!((summary["v0"].as_f64().unwrap() - 0.25).abs() <= 0.02);
    }

    #[test]
    fn sensitivity_reports_unit_gradient_on_family_a() {
        let dir = tempfile::tempdir().unwrap();
        run_in(
            dir.path(),
            &[
                "jumpfield", "sensitivity", "--family", "A", "--N", "1200", "--M", "600",
                "--steps", "12", "--seed", "5",
            ],
        )
        .unwrap();
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap())
                .unwrap();
        let g = summary["gradient"][0].as_f64().unwrap();
        assert!((g - 1.0).abs() <= 0.02, "gradient {g}");
        assert!(dir.path().join("dx.csv").exists());
        assert!(dir.path().join("dmu.csv").exists());
    }

    #[test]
    fn contraction_reports_probe_ratios() {
        let dir = tempfile::tempdir().unwrap();
        run_in(
            dir.path(),
            &[
                "jumpfield", "contraction", "--family", "C", "--N", "1200", "--steps",
                "12", "--seed", "5",
            ],
        )
        .unwrap();
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap())
                .unwrap();
        assert!(summary["maxProbeRatio"].as_f64().unwrap() < 1.0);
    }

    #[test]
    fn cli_parses_all_documented_flags() {
        let cli = parse(&[
            "jumpfield", "solve", "--family", "A", "--N", "100", "--M", "50", "--steps",
            "10", "--seed", "1", "--tol", "1e-5", "--max-iter", "6", "--threads", "2",
            "--out", "artifacts", "--export-paths",
        ]);
        match cli.command {
            Command::Solve(a) => {
                assert_eq!(a.run.n, Some(100));
                assert_eq!(a.run.m, Some(50));
                assert_eq!(a.run.threads, Some(2));
                assert!(a.export_paths);
            }
            _ => panic!("expected solve"),
        }
    }
}
