//! Command-line front end.
//!
//! Exit codes: 0 success, 2 invalid input or arguments, 3 a solver or model
//! fit did not converge, 4 file system error.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use extbal::basis::BasisSpec;
use extbal::estimators::{estimate, estimator_weights, EstimateError, Estimator, EstimatorOptions};
use extbal::io::{self, CsvSchema, IoError, LoadedSource, LoadedTarget, ReportFormat};
use extbal::simulation::{self, run_grid, GridOptions, ScenarioConfig, SimError};
use extbal::theory::{asymptotic_variance, OracleError};

#[derive(Debug)]
enum CliError {
    Validation(String),
    NonConvergence(String),
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::NonConvergence(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::NonConvergence(m) | CliError::Io(m) => m,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Validation(format!("{}: {e}", e.code()))
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Degenerate { .. } => CliError::NonConvergence(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

fn estimate_error(method: Estimator, e: EstimateError) -> CliError {
    let msg = format!("{method}: {e}");
    if e.is_convergence() {
        CliError::NonConvergence(msg)
    } else {
        CliError::Validation(msg)
    }
}

#[derive(Parser)]
#[command(name = "extbal", version, about = "Entropy-balancing estimates of a target-population treatment effect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write per-row balancing weights as CSV.
    Weights(DataCommand),
    /// Estimate the target-population average treatment effect.
    Estimate(DataCommand),
    /// Run a Monte Carlo scenario grid.
    Simulate(SimulateCommand),
    /// Report asymptotic variance terms for a known data-generating process.
    Oracle(OracleCommand),
    /// Split a full data set into a source CSV and a target summary by
    /// sampling source membership with probability 0.8·Φ(κ·score) + 0.1.
    Resample(ResampleCommand),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Human,
    Json,
    Csv,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Human => ReportFormat::Human,
            Format::Json => ReportFormat::Json,
            Format::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(Args)]
struct SchemaArgs {
    /// Name of the 0/1 treatment column.
    #[arg(long, default_value = "treatment")]
    treatment_col: String,
    /// Name of the outcome column.
    #[arg(long, default_value = "outcome")]
    outcome_col: String,
    /// Covariate columns to read (default: all remaining columns).
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    /// Covariates holding category labels.
    #[arg(long, value_delimiter = ',')]
    categorical: Vec<String>,
}

impl SchemaArgs {
    fn schema(&self) -> CsvSchema {
        CsvSchema {
            treatment: self.treatment_col.clone(),
            outcome: self.outcome_col.clone(),
            covariates: self.covariates.clone(),
            categorical: self.categorical.clone(),
        }
    }
}

#[derive(Args)]
struct SolverArgs {
    /// Gradient sup-norm tolerance of the dual solver.
    #[arg(long)]
    tol: Option<f64>,
    /// Newton iteration limit.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Rescale weights to sum to the arm size (default).
    #[arg(long, overrides_with = "no_normalize")]
    normalize: bool,
    /// Keep the raw dual weights.
    #[arg(long, overrides_with = "normalize")]
    no_normalize: bool,
}

impl SolverArgs {
    fn options(&self) -> Result<EstimatorOptions, CliError> {
        let mut opts = EstimatorOptions::default();
        if let Some(t) = self.tol {
            if !(t > 0.0) {
                return Err(CliError::Validation("--tol must be positive".into()));
            }
            opts.solver.tol = t;
        }
        if let Some(m) = self.max_iter {
            opts.solver.max_iter = m;
        }
        opts.solver.normalize = !self.no_normalize;
        Ok(opts)
    }
}

#[derive(Args)]
struct OutputArgs {
    /// Output directory (default: print to standard output).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "human")]
    format: Format,
}

#[derive(Args)]
struct DataCommand {
    /// Source sample CSV.
    #[arg(long)]
    source: PathBuf,
    /// JSON object of target means keyed by H term label.
    #[arg(long)]
    target_summary: PathBuf,
    /// Basis as `H: x1, x2; G: x3` or a path to a JSON basis file.
    #[arg(long)]
    basis: String,
    /// Comma-separated estimators: ipw, ipw_et, ebal, extended.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[command(flatten)]
    schema: SchemaArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct SimulateCommand {
    /// Scenario JSON file (default: the twelve built-in scenarios).
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Master seed; overrides the seeds in the scenario file.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Override the replicate count of every scenario.
    #[arg(long)]
    replicates: Option<usize>,
    /// Multiply bias, SD and RMSE by this factor in the report.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct OracleCommand {
    /// Scenario JSON file (default: the twelve built-in scenarios).
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct ResampleCommand {
    /// Full data CSV to split.
    #[arg(long)]
    source: PathBuf,
    /// Selection score as `col:coef,...`; `const:c` adds an intercept.
    #[arg(long)]
    score: String,
    #[arg(long, default_value_t = 1.0)]
    kappa: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Basis whose H terms are summarized for the target.
    #[arg(long)]
    basis: String,
    #[command(flatten)]
    schema: SchemaArgs,
    /// Directory receiving `source.csv` and `target_summary.json`.
    #[arg(long)]
    out: PathBuf,
}

fn parse_methods(arg: &Option<Vec<String>>, default: &[Estimator]) -> Result<Vec<Estimator>, CliError> {
    let methods = match arg {
        None => default.to_vec(),
        Some(list) => list
            .iter()
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.parse::<Estimator>().map_err(CliError::Validation))
            .collect::<Result<Vec<_>, _>>()?,
    };
    if methods.is_empty() {
        return Err(IoError::EmptyMethods.into());
    }
    Ok(methods)
}

fn require_file(path: &Path, flag: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{flag}: `{}` does not exist", path.display())))
    }
}

/// Writes every `(file name, contents)` pair into `dir`, or prints the first
/// one when no directory is given.
fn emit(out: &Option<PathBuf>, files: &[(String, String)]) -> Result<(), CliError> {
    match out {
        None => {
            print!("{}", files[0].1);
            Ok(())
        }
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
            for (name, body) in files {
                io::write_atomic(&dir.join(name), body.as_bytes())?;
            }
            Ok(())
        }
    }
}

fn load_inputs(cmd: &DataCommand) -> Result<(LoadedSource, BasisSpec, LoadedTarget), CliError> {
    require_file(&cmd.source, "--source")?;
    require_file(&cmd.target_summary, "--target-summary")?;
    let src = io::load_source_csv(&cmd.source, &cmd.schema.schema())?;
    let spec = io::load_basis(&cmd.basis, src.names(), &src.levels)?;
    let target = io::load_target_summary(&cmd.target_summary, &spec, src.names())?;
    Ok((src, spec, target))
}

fn run_weights(cmd: DataCommand) -> Result<(), CliError> {
    let methods = parse_methods(&cmd.methods, &[Estimator::Extended])?;
    let opts = cmd.solver.options()?;
    let (src, spec, target) = load_inputs(&cmd)?;
    let sets = methods
        .iter()
        .map(|&m| estimator_weights(m, &src.sample, &spec, &target.values, &opts).map(|w| w.weights).map_err(|e| estimate_error(m, e)))
        .collect::<Result<Vec<_>, _>>()?;
    emit(&cmd.output.out, &[("weights.csv".into(), io::render_weights(&src.sample, &sets))])
}

fn run_estimate(cmd: DataCommand) -> Result<(), CliError> {
    let methods = parse_methods(&cmd.methods, &Estimator::ALL)?;
    let opts = cmd.solver.options()?;
    let (src, spec, target) = load_inputs(&cmd)?;
    let reports = methods
        .iter()
        .map(|&m| estimate(m, &src.sample, &spec, &target.values, &opts).map_err(|e| estimate_error(m, e)))
        .collect::<Result<Vec<_>, _>>()?;
    let format: ReportFormat = cmd.output.format.into();
    emit(&cmd.output.out, &[(format!("estimate.{}", format.extension()), io::render_estimates(&reports, format))])
}

fn scenarios(path: &Option<PathBuf>) -> Result<Vec<ScenarioConfig>, CliError> {
    match path {
        Some(p) => {
            require_file(p, "--scenario")?;
            Ok(io::load_scenarios(p)?)
        }
        None => Ok(ScenarioConfig::builtin_grid()),
    }
}

fn run_simulate(cmd: SimulateCommand) -> Result<(), CliError> {
    let methods = parse_methods(&cmd.methods, &Estimator::ALL)?;
    let mut configs = scenarios(&cmd.scenario)?;
    if let Some(r) = cmd.replicates {
        if r == 0 {
            return Err(CliError::Validation("--replicates must be positive".into()));
        }
        configs.iter_mut().for_each(|c| c.replicates = r);
    }
    let opts = GridOptions { jobs: cmd.jobs, master_seed: cmd.seed, estimator: cmd.solver.options()? };
    let reports = run_grid(&configs, &methods, &opts)?;
    let format: ReportFormat = cmd.output.format.into();
    emit(
        &cmd.output.out,
        &[
            (format!("simulate.{}", format.extension()), io::render_grid(&reports, format, cmd.scale)),
            ("replicates.csv".into(), io::render_replicates(&reports)),
            ("boxplot.csv".into(), io::render_boxplots(&reports, cmd.scale)),
        ],
    )
}

fn run_oracle(cmd: OracleCommand) -> Result<(), CliError> {
    let configs = scenarios(&cmd.scenario)?;
    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    for c in &configs {
        c.validate()?;
        let grid = c.covariates.default_grid();
        match asymptotic_variance(&c.truth(), &c.basis, &grid) {
            Ok(report) => reports.push((c.name.clone(), report)),
            Err(e @ OracleError::HypothesisViolated(_)) => skipped.push(format!("{}: {e}", c.name)),
            Err(e @ OracleError::NonConverged(_)) => return Err(CliError::NonConvergence(format!("{}: {e}", c.name))),
            Err(e) => return Err(CliError::Validation(format!("{}: {e}", c.name))),
        }
    }
    if reports.is_empty() {
        return Err(CliError::Validation(skipped.join("; ")));
    }
    for s in &skipped {
        eprintln!("skipped {s}");
    }
    let format: ReportFormat = cmd.output.format.into();
    emit(&cmd.output.out, &[(format!("oracle.{}", format.extension()), io::render_oracle(&reports, format))])
}

fn parse_score(text: &str, names: &[String]) -> Result<(f64, Vec<(usize, f64)>), CliError> {
    let mut intercept = 0.0;
    let mut coefs = Vec::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (name, c) = item.rsplit_once(':').ok_or_else(|| CliError::Validation(format!("--score: `{item}` is not `column:coef`")))?;
        let c: f64 = c.trim().parse().map_err(|_| CliError::Validation(format!("--score: bad coefficient in `{item}`")))?;
        let name = name.trim();
        if name == "const" {
            intercept += c;
        } else {
            let j = names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| CliError::Validation(format!("--score: unknown column `{name}`")))?;
            coefs.push((j, c));
        }
    }
    Ok((intercept, coefs))
}

fn run_resample(cmd: ResampleCommand) -> Result<(), CliError> {
    require_file(&cmd.source, "--source")?;
    let schema = cmd.schema.schema();
    let full = io::load_source_csv(&cmd.source, &schema)?;
    let spec = io::load_basis(&cmd.basis, full.names(), &full.levels)?;
    let (intercept, coefs) = parse_score(&cmd.score, full.names())?;
    let x = full.sample.covariates();
    let scores: Vec<f64> = (0..full.sample.n()).map(|i| intercept + coefs.iter().map(|&(j, c)| c * x[(i, j)]).sum::<f64>()).collect();
    let member = simulation::psi_split(&scores, cmd.kappa, cmd.seed);
    let keep: Vec<usize> = (0..member.len()).filter(|&i| member[i]).collect();
    let rest: Vec<usize> = (0..member.len()).filter(|&i| !member[i]).collect();
    if keep.is_empty() || rest.is_empty() {
        return Err(CliError::Validation("resampling left the source or the target empty".into()));
    }
    let pick = |v: &[f64]| keep.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let treatment: Vec<bool> = keep.iter().map(|&i| full.sample.treatment()[i]).collect();
    let source = extbal::SourceSample::new(x.select_rows(&keep), treatment, pick(full.sample.outcome()))
        .and_then(|s| s.with_names(full.names().to_vec()))
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let mut values = vec![0.0; spec.h_len()];
    for &i in &rest {
        for (k, v) in spec.eval_h(&full.sample.row(i)).into_iter().enumerate() {
            values[k] += v;
        }
    }
    values.iter_mut().for_each(|v| *v /= rest.len() as f64);
    values[0] = 1.0;
    let target = LoadedTarget { values, n_t: Some(rest.len() as f64), labels: spec.h_labels(full.names()) };
    let src = LoadedSource { sample: source, levels: full.levels.clone() };
    emit(
        &Some(cmd.out),
        &[("source.csv".into(), io::source_csv_string(&src, &schema)), ("target_summary.json".into(), io::target_summary_json(&target) + "\n")],
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Weights(c) => run_weights(c),
        Command::Estimate(c) => run_estimate(c),
        Command::Simulate(c) => run_simulate(c),
        Command::Oracle(c) => run_oracle(c),
        Command::Resample(c) => run_resample(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
