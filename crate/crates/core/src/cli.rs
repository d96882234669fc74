//! Command-line surface and long-format CSV ingestion.
//!
//! Exit codes: 0 success, 1 parse or I/O failure, 2 invalid input or a failed
//! check, 3 iteration cap reached (results are still written), 4 problem
//! too large for exhaustive enumeration.

use std::collections::{BTreeSet, HashMap};
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;

use crate::balance_qp::design_weight_qp;
use crate::design::{
    design_objective, iterate_step, orient, DesignAssignment, DesignConfig, DesignError, DesignProblem, Hyper,
    Variant,
};
use crate::harness::{
    estimate_effect, parse_methods, rmse, run_comparison, ExperimentReport, HarnessError, Method, Source, Subsample,
    Window,
};
use crate::numerics::Matrix;
use crate::oracle::{brute_force_design, check_l1_duality, default_lambda_grid, lambda_sweep, OracleError};
use crate::panel::{PanelData, PanelError};
use crate::simulate::{FactorModelSpec, Regime};

pub const SEED_ENV: &str = "SYNTHDESIGN_SEED";

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("column {0:?} not found in header")]
    MissingColumn(String),
    #[error("duplicate row for unit {unit:?} at time {time:?}")]
    DuplicateCell { unit: String, time: String },
    #[error("incomplete unit x time grid; {} missing cells, first: {:?}", .missing.len(), .missing.first())]
    IncompleteGrid { missing: Vec<(String, String)> },
    #[error("non-numeric outcome {value:?} on data row {row}")]
    NonNumericOutcome { row: usize, value: String },
    #[error("header has fewer than three columns")]
    TooFewColumns,
    #[error(transparent)]
    Panel(#[from] PanelError),
}

/// Column layout of a long-format panel file. Unset columns default to the
/// first, second and third header fields.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PanelCsvSpec {
    pub unit_column: Option<String>,
    pub time_column: Option<String>,
    pub outcome_column: Option<String>,
    pub exclude_units: Vec<String>,
    pub pre_periods: usize,
}

fn sniff_delimiter(text: &str) -> u8 {
    let header = text.lines().next().unwrap_or("");
    let count = |c: char| header.matches(c).count();
    [(b';', count(';')), (b'\t', count('\t')), (b',', count(','))]
        .into_iter()
        .max_by_key(|&(_, n)| n)
        .filter(|&(_, n)| n > 0)
        .map_or(b',', |(d, _)| d)
}

fn period_order(times: &BTreeSet<String>) -> Vec<String> {
    let mut out: Vec<String> = times.iter().cloned().collect();
    let numeric: Option<Vec<f64>> = out.iter().map(|t| t.trim().parse::<f64>().ok()).collect();
    if let Some(keys) = numeric {
        let mut pairs: Vec<(f64, String)> = keys.into_iter().zip(out).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite period").then_with(|| a.1.cmp(&b.1)));
        out = pairs.into_iter().map(|(_, t)| t).collect();
    }
    out
}

/// Pivots a long-format `(unit, time, outcome)` file into a panel with
/// units sorted lexicographically and periods in ascending order.
pub fn load_panel_csv(path: &Path, spec: &PanelCsvSpec) -> Result<PanelData, CsvError> {
    let text = fs::read_to_string(path).map_err(|source| CsvError::Io { path: path.display().to_string(), source })?;
    parse_panel_csv(&text, spec)
}

pub fn parse_panel_csv(text: &str, spec: &PanelCsvSpec) -> Result<PanelData, CsvError> {
    let mut reader = csv::ReaderBuilder::new().delimiter(sniff_delimiter(text)).trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    if header.len() < 3 {
        return Err(CsvError::TooFewColumns);
    }
    let find = |name: &Option<String>, default: usize| -> Result<usize, CsvError> {
        match name {
            None => Ok(default),
            Some(n) => header.iter().position(|h| h == n).ok_or_else(|| CsvError::MissingColumn(n.clone())),
        }
    };
    let ui = find(&spec.unit_column, 0)?;
    let ti = find(&spec.time_column, 1)?;
    let oi = find(&spec.outcome_column, 2)?;
    let mut cells: HashMap<(String, String), f64> = HashMap::new();
    let mut units = BTreeSet::new();
    let mut times = BTreeSet::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let unit = record.get(ui).unwrap_or("").to_string();
        if spec.exclude_units.iter().any(|e| e == &unit) {
            continue;
        }
        let time = record.get(ti).unwrap_or("").to_string();
        let raw = record.get(oi).unwrap_or("");
        let value: f64 = raw
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| CsvError::NonNumericOutcome { row: row + 1, value: raw.to_string() })?;
        units.insert(unit.clone());
        times.insert(time.clone());
        if cells.insert((unit.clone(), time.clone()), value).is_some() {
            return Err(CsvError::DuplicateCell { unit, time });
        }
    }
    let units: Vec<String> = units.into_iter().collect();
    let periods = period_order(&times);
    let mut missing = Vec::new();
    let mut outcomes = Matrix::zeros(units.len(), periods.len());
    for (i, u) in units.iter().enumerate() {
        for (t, p) in periods.iter().enumerate() {
            match cells.get(&(u.clone(), p.clone())) {
                Some(&v) => outcomes[(i, t)] = v,
                None => missing.push((u.clone(), p.clone())),
            }
        }
    }
    if !missing.is_empty() {
        return Err(CsvError::IncompleteGrid { missing });
    }
    Ok(PanelData::new(units, periods, outcomes, spec.pre_periods)?)
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    NonConvergence(String),
    #[error("{0}")]
    TooLarge(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) | CliError::Parse(_) => 1,
            CliError::Validation(_) => 2,
            CliError::NonConvergence(_) => 3,
            CliError::TooLarge(_) => 4,
        }
    }
}

impl From<CsvError> for CliError {
    fn from(e: CsvError) -> Self {
        match e {
            CsvError::Io { .. } => CliError::Io(e.to_string()),
            CsvError::Csv(_) | CsvError::NonNumericOutcome { .. } | CsvError::TooFewColumns => {
                CliError::Parse(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<DesignError> for CliError {
    fn from(e: DesignError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::TooLarge { .. } => CliError::TooLarge(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "synthdesign", version, about = "Synthetic-control experimental design")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute an assignment and weights for a panel.
    Design(DesignArgs),
    /// Compare methods on simulated factor-model panels.
    Simulate(SimulateArgs),
    /// Compare methods on an observed panel (placebo, no injected effect).
    Evaluate(EvaluateArgs),
    /// Exhaustive global design for small panels.
    Oracle(OracleArgs),
    /// Run the built-in invariant checks.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Long-format CSV with one row per unit and period.
    #[arg(long)]
    pub input: PathBuf,
    /// Number of pre-treatment periods.
    #[arg(long = "pre")]
    pub pre: usize,
    #[arg(long)]
    pub unit_col: Option<String>,
    #[arg(long)]
    pub time_col: Option<String>,
    #[arg(long)]
    pub outcome_col: Option<String>,
    /// Units to drop, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub exclude: Vec<String>,
}

impl InputArgs {
    fn load(&self) -> Result<PanelData, CliError> {
        let spec = PanelCsvSpec {
            unit_column: self.unit_col.clone(),
            time_column: self.time_col.clone(),
            outcome_column: self.outcome_col.clone(),
            exclude_units: self.exclude.clone(),
            pre_periods: self.pre,
        };
        Ok(load_panel_csv(&self.input, &spec)?)
    }
}

#[derive(Debug, Args)]
pub struct HyperArgs {
    /// Gram ridge; a trailing `x` scales by tr(YY')/N.
    #[arg(long)]
    pub alpha: Option<Hyper>,
    /// Balance penalty; a trailing `x` scales by tr(YY')/N.
    #[arg(long)]
    pub lambda: Option<Hyper>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl HyperArgs {
    fn config(&self, variant: Variant) -> Result<DesignConfig, CliError> {
        let d = DesignConfig::default();
        let seed = match std::env::var(SEED_ENV) {
            Ok(s) => s.trim().parse().map_err(|_| CliError::Parse(format!("{SEED_ENV}={s:?} is not a u64")))?,
            Err(_) => self.seed.unwrap_or(d.seed),
        };
        let config = DesignConfig {
            alpha: self.alpha.unwrap_or(d.alpha),
            lambda: self.lambda.unwrap_or(d.lambda),
            beta: self.beta.unwrap_or(d.beta),
            sigma: self.sigma.unwrap_or(d.sigma),
            variant,
            max_iters: self.max_iters.unwrap_or(d.max_iters),
            seed,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// JSON destination; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DesignArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value = "normspcd")]
    pub variant: Variant,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value = "random")]
    pub regime: Regime,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub t: usize,
    #[arg(long, default_value_t = 10)]
    pub s: usize,
    #[arg(long, default_value_t = 8)]
    pub latent: usize,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 1.0)]
    pub factor_noise: f64,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    #[arg(long, default_value = "spcd,normspcd,random,sc")]
    pub methods: String,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[command(flatten)]
    pub out: OutputArgs,
    /// Per-replication rows for plotting.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value = "spcd,random,sc")]
    pub methods: String,
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    /// Draw this many units per replication.
    #[arg(long)]
    pub subsample_units: Option<usize>,
    /// Post periods per replication when subsampling.
    #[arg(long, default_value_t = 5)]
    pub post: usize,
    #[arg(long, default_value = "first")]
    pub window: String,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[command(flatten)]
    pub out: OutputArgs,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub lambda_sweep: bool,
    #[arg(long, default_value_t = crate::oracle::DEFAULT_CAP)]
    pub cap: usize,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn write_json<T: Serialize>(value: &T, out: &OutputArgs) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    match &out.output {
        Some(path) => fs::write(path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}").map_err(|e| CliError::Io(e.to_string()))
        }
    }
}

fn write_records_csv(report: &ExperimentReport, path: &Path) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["replication", "method", "seed", "rmse", "aggregate", "objective", "iterations", "converged"])
        .map_err(io)?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in &report.records {
        w.write_record([
            r.replication.to_string(),
            r.method.clone(),
            r.seed.to_string(),
            r.rmse.to_string(),
            r.aggregate.to_string(),
            opt(r.objective.map(|v| v.to_string())),
            opt(r.iterations.map(|v| v.to_string())),
            opt(r.converged.map(|v| v.to_string())),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))
}

/// Output of `design`; the first eleven keys form the stable record schema.
#[derive(Debug, Serialize)]
pub struct DesignRecord {
    pub method: String,
    pub signs: Vec<i8>,
    pub weights: Vec<f64>,
    pub per_period_estimates: Vec<f64>,
    pub aggregate: Option<f64>,
    pub rmse: Option<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub seed: u64,
    pub config: DesignConfig,
    pub units: Vec<String>,
    pub treated_units: Vec<String>,
    pub alpha: f64,
    pub lambda: f64,
    pub objective_trace: Vec<f64>,
    pub sign_mismatch: bool,
    pub qp_objective: Option<f64>,
}

fn cmd_design(args: &DesignArgs) -> Result<i32, CliError> {
    let panel = args.input.load()?;
    let config = args.hyper.config(args.variant)?;
    let sol = DesignProblem::new(&panel.pre_matrix(), &config)?.solve(&config)?;
    let weights = sol.weights.to_group_sums_one(&sol.assignment)?;
    let (estimates, aggregate, score) = if panel.post_periods() > 0 {
        let e = estimate_effect(&panel, &sol.assignment, &weights, None)?;
        let r = rmse(&e.per_period, 0.0)?;
        (e.per_period, Some(e.aggregate), Some(r))
    } else {
        (Vec::new(), None, None)
    };
    let qp_objective = design_weight_qp(&panel.pre_matrix(), &sol.assignment, config.sigma)
        .ok()
        .map(|qp| qp.objective(&weights.values));
    let treated = sol.assignment.treated_units().unwrap_or_default();
    let record = DesignRecord {
        method: config.variant.to_string(),
        signs: sol.assignment.signs().to_vec(),
        weights: weights.values.clone(),
        per_period_estimates: estimates,
        aggregate,
        rmse: score,
        objective: sol.final_objective(),
        iterations: sol.iterations,
        converged: sol.converged,
        seed: config.seed,
        config: config.clone(),
        units: panel.units().to_vec(),
        treated_units: treated.iter().map(|&i| panel.units()[i].clone()).collect(),
        alpha: sol.alpha,
        lambda: sol.lambda,
        objective_trace: sol.objective_trace.clone(),
        sign_mismatch: sol.sign_mismatch,
        qp_objective,
    };
    write_json(&record, &args.out)?;
    if sol.converged {
        Ok(0)
    } else {
        Err(CliError::NonConvergence(format!("no fixed point after {} iterations", sol.iterations)))
    }
}

fn parse_method_list(list: &str) -> Result<Vec<Method>, CliError> {
    parse_methods(list).map_err(CliError::Validation)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<i32, CliError> {
    let config = args.hyper.config(Variant::NormSpcd)?;
    let spec = FactorModelSpec {
        n_units: args.n,
        pre_periods: args.t,
        post_periods: args.s,
        latent_dim: args.latent,
        regime: args.regime,
        tau: args.tau,
        noise_sd: args.noise,
        factor_noise_sd: args.factor_noise,
        seed: config.seed,
        ..FactorModelSpec::default()
    };
    spec.validate().map_err(|e| CliError::Validation(e.to_string()))?;
    if spec.is_explosive() {
        eprintln!("warning: |ar_coef| >= 1, factor paths will not be stationary");
    }
    let methods = parse_method_list(&args.methods)?;
    let report = run_comparison(&Source::Simulated(spec), &methods, args.reps, &config)?;
    write_json(&report, &args.out)?;
    if let Some(path) = &args.csv {
        write_records_csv(&report, path)?;
    }
    Ok(0)
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<i32, CliError> {
    let panel = args.input.load()?;
    let config = args.hyper.config(Variant::NormSpcd)?;
    let methods = parse_method_list(&args.methods)?;
    let window = match args.window.to_ascii_lowercase().as_str() {
        "first" => Window::First,
        "random" => Window::Random,
        other => return Err(CliError::Validation(format!("unknown window {other:?} (expected first or random)"))),
    };
    let subsample = args.subsample_units.map(|units| Subsample {
        units,
        pre_periods: args.input.pre,
        post_periods: args.post,
        window,
    });
    if subsample.is_none() && panel.post_periods() == 0 {
        return Err(CliError::Validation("no post-treatment periods to evaluate".into()));
    }
    let report = run_comparison(&Source::Real { panel, subsample }, &methods, args.reps, &config)?;
    write_json(&report, &args.out)?;
    if let Some(path) = &args.csv {
        write_records_csv(&report, path)?;
    }
    Ok(0)
}

#[derive(Debug, Serialize)]
struct OracleOutput {
    units: Vec<String>,
    alpha: f64,
    lambda: f64,
    #[serde(flatten)]
    result: crate::oracle::OracleResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda_sweep: Option<crate::oracle::LambdaSweep>,
}

fn cmd_oracle(args: &OracleArgs) -> Result<i32, CliError> {
    let panel = args.input.load()?;
    if panel.n_units() > args.cap {
        return Err(CliError::TooLarge(format!("{} units exceed the enumeration cap of {}", panel.n_units(), args.cap)));
    }
    let config = args.hyper.config(Variant::NormSpcd)?;
    let y = panel.pre_matrix();
    let problem = DesignProblem::new(&y, &config)?;
    let (alpha, lambda) = config.resolve(&y);
    let result = brute_force_design(problem.gram(), args.cap)?;
    let sweep = if args.lambda_sweep {
        let sigma = if config.sigma > 0.0 { config.sigma } else { alpha };
        Some(lambda_sweep(&y, sigma, &default_lambda_grid(&y), args.cap)?)
    } else {
        None
    };
    write_json(&OracleOutput { units: panel.units().to_vec(), alpha, lambda, result, lambda_sweep: sweep }, &args.out)?;
    Ok(0)
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Outcome of one built-in check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Monotone ascent, fixed-point certificates, the duality and value
/// identities, and QP stationarity on seeded random problems.
pub fn run_checks(seed: u64) -> Vec<CheckLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = Vec::new();

    let (mut runs, mut bad_trace, mut bad_fixed) = (0, 0, 0);
    for k in 0..200 {
        let n = 3 + k % 12;
        let y = gaussian(&mut rng, n, 1 + k % 7);
        let variant = if k % 2 == 0 { Variant::Spcd } else { Variant::NormSpcd };
        let config = DesignConfig { variant, ..DesignConfig::default() };
        let Ok(problem) = DesignProblem::new(&y, &config) else {
            bad_trace += 1;
            continue;
        };
        let start = DesignAssignment::from_real(gaussian(&mut rng, 1, n).row(0)).expect("n >= 3");
        let Ok(sol) = problem.solve_from(start, &config) else {
            bad_trace += 1;
            continue;
        };
        runs += 1;
        if sol.objective_trace.windows(2).any(|w| w[1] < w[0] - 1e-12 * w[0].abs()) {
            bad_trace += 1;
        }
        if sol.converged {
            let y = DesignAssignment::new(sol.assignment.signs().to_vec()).expect("valid");
            let again = iterate_step(problem.inverse(), &y, &config).map(|a| a.signs() == y.signs());
            let rerun = problem.solve_from(y, &config).map(|s| s.iterations == 0);
            if again != Ok(true) || rerun != Ok(true) {
                bad_fixed += 1;
            }
        }
    }
    lines.push(CheckLine {
        name: "monotone ascent",
        passed: bad_trace == 0,
        detail: format!("{runs} runs, {bad_trace} violations"),
    });
    lines.push(CheckLine {
        name: "fixed-point certificate",
        passed: bad_fixed == 0,
        detail: format!("{bad_fixed} converged runs failed the certificate"),
    });

    let (mut dual_bad, mut value_bad) = (0, 0);
    for _ in 0..50 {
        let b = gaussian(&mut rng, 6, 6);
        let c = b.row_gram().shifted(0.5);
        match check_l1_duality(&c, 1e-10, crate::oracle::DEFAULT_CAP) {
            Ok(d) if d.holds => {}
            _ => dual_bad += 1,
        }
        match brute_force_design(&c, crate::oracle::DEFAULT_CAP) {
            Ok(r) if (r.min_objective - 1.0 / r.best_value).abs() <= 1e-10 * (1.0 / r.best_value) => {}
            _ => value_bad += 1,
        }
    }
    lines.push(CheckLine { name: "l1 duality", passed: dual_bad == 0, detail: format!("{dual_bad}/50 failures") });
    lines.push(CheckLine { name: "value identity", passed: value_bad == 0, detail: format!("{value_bad}/50 failures") });

    let mut qp_bad = 0;
    for k in 0..50 {
        let n = 4 + k % 10;
        let y = gaussian(&mut rng, n, 2 + k % 9);
        let Ok(signs) = DesignAssignment::from_real(gaussian(&mut rng, 1, n).row(0)) else { continue };
        if !signs.is_split() {
            continue;
        }
        let asg = orient(&signs);
        match design_weight_qp(&y, &asg, 0.01).and_then(|qp| qp.solve()) {
            Ok(out) if out.converged => {}
            _ => qp_bad += 1,
        }
    }
    lines.push(CheckLine { name: "qp stationarity", passed: qp_bad == 0, detail: format!("{qp_bad}/50 failures") });
    lines
}

fn cmd_check(args: &CheckArgs) -> Result<i32, CliError> {
    let seed = match std::env::var(SEED_ENV) {
        Ok(s) => s.trim().parse().map_err(|_| CliError::Parse(format!("{SEED_ENV}={s:?} is not a u64")))?,
        Err(_) => args.seed,
    };
    let lines = run_checks(seed);
    let mut failed = 0;
    for l in &lines {
        println!("{} {}: {}", if l.passed { "PASS" } else { "FAIL" }, l.name, l.detail);
        failed += usize::from(!l.passed);
    }
    if failed > 0 {
        Err(CliError::Validation(format!("{failed} check(s) failed")))
    } else {
        Ok(0)
    }
}

/// Recomputes the design objective of stored signs; used to verify JSON
/// round trips.
pub fn objective_of_signs(y_pre: &Matrix, signs: &[i8], config: &DesignConfig) -> Result<f64, DesignError> {
    let problem = DesignProblem::new(y_pre, config)?;
    design_objective(problem.inverse(), &DesignAssignment::new(signs.to_vec())?, config)
}

pub fn run(cli: &Cli) -> Result<i32, CliError> {
    match &cli.command {
        Command::Design(a) => cmd_design(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Check(a) => cmd_check(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = "unit,time,y\nb,2,4\na,1,1\nb,1,3\na,2,2\na,3,5\nb,3,6\n";

    #[test]
    fn pivots_sorted() {
        let p = parse_panel_csv(TOY, &PanelCsvSpec { pre_periods: 2, ..Default::default() }).unwrap();
        assert_eq!(p.units(), &["a".to_string(), "b".to_string()]);
        assert_eq!(p.periods(), &["1".to_string(), "2".to_string(), "3".to_string()]);
        assert_eq!(p.outcomes().row(0), &[1.0, 2.0, 5.0]);
        assert_eq!(p.outcomes().row(1), &[3.0, 4.0, 6.0]);
    }

    #[test]
    fn shuffled_rows_give_same_panel() {
        let mut lines: Vec<&str> = TOY.lines().collect();
        let header = lines.remove(0);
        lines.reverse();
        let shuffled = format!("{header}\n{}\n", lines.join("\n"));
        let spec = PanelCsvSpec { pre_periods: 2, ..Default::default() };
        assert_eq!(parse_panel_csv(TOY, &spec).unwrap(), parse_panel_csv(&shuffled, &spec).unwrap());
    }

    #[test]
    fn semicolons_exclusions_and_named_columns() {
        let text = "State;Year;Packs;treated\nX;1970;1.5;0\nY;1970;2.5;0\nZ;1970;9;1\nX;1971;1.0;0\nY;1971;3.0;0\nZ;1971;9;1\n";
        let spec = PanelCsvSpec {
            outcome_column: Some("Packs".into()),
            exclude_units: vec!["Z".into()],
            pre_periods: 1,
            ..Default::default()
        };
        let p = parse_panel_csv(text, &spec).unwrap();
        assert_eq!(p.n_units(), 2);
        assert_eq!(p.outcomes().row(1), &[2.5, 3.0]);
    }

    #[test]
    fn numeric_periods_sort_by_value() {
        let text = "u,t,y\na,10,1\na,9,2\nb,10,3\nb,9,4\n";
        let p = parse_panel_csv(text, &PanelCsvSpec { pre_periods: 1, ..Default::default() }).unwrap();
        assert_eq!(p.periods(), &["9".to_string(), "10".to_string()]);
    }

    #[test]
    fn ingestion_errors() {
        let spec = PanelCsvSpec { pre_periods: 1, ..Default::default() };
        let missing = "u,t,y\na,1,1\na,2,2\nb,1,3\n";
        match parse_panel_csv(missing, &spec) {
            Err(CsvError::IncompleteGrid { missing }) => assert_eq!(missing, vec![("b".to_string(), "2".to_string())]),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_panel_csv("u,t,y\na,1,x\n", &spec),
            Err(CsvError::NonNumericOutcome { row: 1, .. })
        ));
        assert!(matches!(
            parse_panel_csv("u,t,y\na,1,1\na,1,2\n", &spec),
            Err(CsvError::DuplicateCell { .. })
        ));
        let named = PanelCsvSpec { outcome_column: Some("nope".into()), ..spec.clone() };
        assert!(matches!(parse_panel_csv(TOY, &named), Err(CsvError::MissingColumn(_))));
        // decimal commas are not numbers
        assert!(matches!(
            parse_panel_csv("u;t;y\na;1;1,5\n", &spec),
            Err(CsvError::NonNumericOutcome { .. })
        ));
    }

    #[test]
    fn builtin_checks_pass() {
        for line in run_checks(1) {
            assert!(line.passed, "{}: {}", line.name, line.detail);
        }
    }
}
