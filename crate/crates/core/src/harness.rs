//! Effect estimation, RMSE and paired multi-method comparisons.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balance_qp::QpError;
use crate::baselines::{classic_sc, mean_gap_metric, random_design, rerandomize, RerandSpec};
use crate::design::{run_design, DesignAssignment, DesignConfig, DesignError, Variant, WeightVector};
use crate::panel::{PanelData, PanelError};
use crate::simulate::{generate_panel, FactorModelSpec, SimulateError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error("weights do not match the assignment: {0}")]
    NormalizationMismatch(String),
    #[error("cannot compute RMSE of an empty sequence")]
    EmptySequence,
    #[error("invalid comparison setup: {0}")]
    InvalidSetup(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// 64-bit mix of a master seed and a stream index (splitmix64 finalizer).
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Effect {
    pub per_period: Vec<f64>,
    pub aggregate: f64,
}

/// Weighted treated-minus-control contrast in each post period. With
/// `tau_injected`, treated post outcomes are shifted by `τ` first.
pub fn estimate_effect(
    panel: &PanelData,
    assignment: &DesignAssignment,
    weights: &WeightVector,
    tau_injected: Option<f64>,
) -> Result<Effect> {
    let mask = assignment
        .treated_mask()
        .ok_or_else(|| HarnessError::NormalizationMismatch("assignment is not oriented".into()))?;
    if assignment.len() != panel.n_units() {
        return Err(HarnessError::NormalizationMismatch(format!(
            "{} signs for {} units",
            assignment.len(),
            panel.n_units()
        )));
    }
    let w = weights
        .to_group_sums_one(assignment)
        .map_err(|e| HarnessError::NormalizationMismatch(e.to_string()))?;
    w.validate(assignment).map_err(|e| HarnessError::NormalizationMismatch(e.to_string()))?;
    let post = panel.post_matrix();
    if post.ncols() == 0 {
        return Err(HarnessError::InvalidSetup("panel has no post-treatment periods".into()));
    }
    let tau = tau_injected.unwrap_or(0.0);
    let mut per_period = vec![0.0; post.ncols()];
    for (i, (&m, &wi)) in mask.iter().zip(&w.values).enumerate() {
        let c = if m { wi } else { -wi };
        if c == 0.0 {
            continue;
        }
        let shift = if m { tau } else { 0.0 };
        for (e, y) in per_period.iter_mut().zip(post.row(i)) {
            *e += c * (y + shift);
        }
    }
    let aggregate = per_period.iter().sum::<f64>() / per_period.len() as f64;
    Ok(Effect { per_period, aggregate })
}

/// `sqrt(meanₜ (τ̂ₜ − τ)²)`
pub fn rmse(per_period: &[f64], tau_true: f64) -> Result<f64> {
    if per_period.is_empty() {
        return Err(HarnessError::EmptySequence);
    }
    Ok((per_period.iter().map(|e| (e - tau_true).powi(2)).sum::<f64>() / per_period.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Spcd,
    NormSpcd,
    Random,
    Rerandomize(usize),
    ClassicSc,
}

impl Method {
    fn stream(self) -> u64 {
        match self {
            Method::Spcd => 1,
            Method::NormSpcd => 2,
            Method::Random => 3,
            Method::Rerandomize(_) => 4,
            Method::ClassicSc => 5,
        }
    }

    pub fn is_stochastic(self) -> bool {
        !matches!(self, Method::Spcd | Method::NormSpcd)
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim().to_ascii_lowercase();
        if let Some(k) = s.strip_prefix("rerand:") {
            let k: usize = k.parse().map_err(|_| format!("bad rerandomization count in {s:?}"))?;
            if k == 0 {
                return Err("rerandomization needs at least one draw".into());
            }
            return Ok(Method::Rerandomize(k));
        }
        match s.as_str() {
            "spcd" => Ok(Method::Spcd),
            "normspcd" => Ok(Method::NormSpcd),
            "random" => Ok(Method::Random),
            "sc" => Ok(Method::ClassicSc),
            other => Err(format!("unknown method {other:?} (expected spcd, normspcd, random, sc or rerand:K)")),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Spcd => f.write_str("spcd"),
            Method::NormSpcd => f.write_str("normspcd"),
            Method::Random => f.write_str("random"),
            Method::Rerandomize(k) => write!(f, "rerand:{k}"),
            Method::ClassicSc => f.write_str("sc"),
        }
    }
}

pub fn parse_methods(list: &str) -> std::result::Result<Vec<Method>, String> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    /// Periods `1..T+S` of the source panel.
    First,
    /// A uniformly placed window of `T+S` consecutive periods.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subsample {
    pub units: usize,
    pub pre_periods: usize,
    pub post_periods: usize,
    pub window: Window,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    /// Fresh factor-model panel per replication with `spec.tau` injected.
    Simulated(FactorModelSpec),
    /// Observed panel under the placebo protocol (`τ = 0`).
    Real { panel: PanelData, subsample: Option<Subsample> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRecord {
    pub method: String,
    pub replication: usize,
    pub seed: u64,
    pub signs: Vec<i8>,
    pub treated_units: Vec<usize>,
    /// Group-sums-one weights.
    pub weights: Vec<f64>,
    pub per_period_estimates: Vec<f64>,
    pub aggregate: f64,
    pub rmse: f64,
    pub objective: Option<f64>,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    pub config: DesignConfig,
    pub wall_clock_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub replications: usize,
    pub mean_rmse: f64,
    pub sd_rmse: f64,
    /// Normal-approximation 95% interval for the mean RMSE.
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean_aggregate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub replications: usize,
    pub tau_true: f64,
    pub config: DesignConfig,
    pub summaries: Vec<MethodSummary>,
    pub records: Vec<MethodRecord>,
}

impl ExperimentReport {
    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        let name = method.to_string();
        self.summaries.iter().find(|s| s.method == name)
    }
}

/// Design, estimate and score one method on one panel.
pub fn evaluate_method(
    panel: &PanelData,
    method: Method,
    tau: f64,
    config: &DesignConfig,
    seed: u64,
    replication: usize,
) -> Result<MethodRecord> {
    let start = Instant::now();
    let n = panel.n_units();
    let (assignment, weights, objective, iterations, converged) = match method {
        Method::Spcd | Method::NormSpcd => {
            let variant = if method == Method::Spcd { Variant::Spcd } else { Variant::NormSpcd };
            let sol = run_design(&panel.pre_matrix(), &config.clone().with_variant(variant))?;
            let w = sol.weights.to_group_sums_one(&sol.assignment)?;
            let obj = sol.final_objective();
            (sol.assignment, w, Some(obj), Some(sol.iterations), Some(sol.converged))
        }
        Method::Random => {
            let (a, w) = random_design(n, seed);
            let m = mean_gap_metric(&panel.pre_matrix(), &a);
            (a, w, Some(m), None, None)
        }
        Method::Rerandomize(k) => {
            let r = rerandomize(&panel.pre_matrix(), &RerandSpec::new(k, seed));
            (r.assignment, r.weights, Some(r.metric), None, None)
        }
        Method::ClassicSc => {
            let sc = classic_sc(panel, seed)?;
            (sc.assignment, sc.weights, Some(sc.stats.objective), Some(sc.stats.iterations), Some(true))
        }
    };
    let effect = estimate_effect(panel, &assignment, &weights, Some(tau))?;
    let score = rmse(&effect.per_period, tau)?;
    Ok(MethodRecord {
        method: method.to_string(),
        replication,
        seed,
        signs: assignment.signs().to_vec(),
        treated_units: assignment.treated_units().unwrap_or_default(),
        weights: weights.values,
        per_period_estimates: effect.per_period,
        aggregate: effect.aggregate,
        rmse: score,
        objective,
        iterations,
        converged,
        config: config.clone(),
        wall_clock_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Panel and true effect for one replication.
pub fn replication_panel(source: &Source, rep_seed: u64) -> Result<(PanelData, f64)> {
    let panel_seed = derive_seed(rep_seed, 0);
    match source {
        Source::Simulated(spec) => {
            let sim = generate_panel(&FactorModelSpec { seed: panel_seed, ..spec.clone() })?;
            Ok((sim.panel, sim.tau))
        }
        Source::Real { panel, subsample: None } => Ok((panel.clone(), 0.0)),
        Source::Real { panel, subsample: Some(sub) } => {
            let span = sub.pre_periods + sub.post_periods;
            if sub.units < 2 || sub.units > panel.n_units() || span > panel.n_periods() || sub.pre_periods == 0 {
                return Err(HarnessError::InvalidSetup(format!(
                    "cannot draw {} units x {} periods from a {}x{} panel",
                    sub.units,
                    span,
                    panel.n_units(),
                    panel.n_periods()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(panel_seed);
            let mut units = sample(&mut rng, panel.n_units(), sub.units).into_vec();
            units.sort_unstable();
            let start = match sub.window {
                Window::First => 0,
                Window::Random => rng.random_range(0..=panel.n_periods() - span),
            };
            Ok((panel.subpanel(&units, start, sub.pre_periods, sub.post_periods)?, 0.0))
        }
    }
}

fn summarize(method: Method, records: &[&MethodRecord]) -> MethodSummary {
    let r = records.len();
    let mean = records.iter().map(|m| m.rmse).sum::<f64>() / r as f64;
    let sd = if r > 1 {
        (records.iter().map(|m| (m.rmse - mean).powi(2)).sum::<f64>() / (r - 1) as f64).sqrt()
    } else {
        0.0
    };
    let half = 1.96 * sd / (r as f64).sqrt();
    MethodSummary {
        method: method.to_string(),
        replications: r,
        mean_rmse: mean,
        sd_rmse: sd,
        ci_low: mean - half,
        ci_high: mean + half,
        mean_aggregate: records.iter().map(|m| m.aggregate).sum::<f64>() / r as f64,
    }
}

/// Runs every method on the same panel in each replication. Replications
/// run in parallel; seeds derive from `config.seed` and the replication
/// index, so the report does not depend on scheduling.
pub fn run_comparison(
    source: &Source,
    methods: &[Method],
    replications: usize,
    config: &DesignConfig,
) -> Result<ExperimentReport> {
    if replications == 0 {
        return Err(HarnessError::InvalidSetup("replications must be >= 1".into()));
    }
    if methods.is_empty() {
        return Err(HarnessError::InvalidSetup("no methods given".into()));
    }
    config.validate()?;
    let per_rep: Vec<Vec<MethodRecord>> = (0..replications)
        .into_par_iter()
        .map(|rep| {
            let rep_seed = derive_seed(config.seed, rep as u64);
            let (panel, tau) = replication_panel(source, rep_seed)?;
            methods
                .iter()
                .map(|&m| evaluate_method(&panel, m, tau, config, derive_seed(rep_seed, m.stream()), rep))
                .collect()
        })
        .collect::<Result<_>>()?;
    let records: Vec<MethodRecord> = per_rep.into_iter().flatten().collect();
    let summaries = methods
        .iter()
        .map(|&m| {
            let name = m.to_string();
            let rs: Vec<&MethodRecord> = records.iter().filter(|r| r.method == name).collect();
            summarize(m, &rs)
        })
        .collect();
    let tau_true = match source {
        Source::Simulated(spec) => spec.tau,
        Source::Real { .. } => 0.0,
    };
    Ok(ExperimentReport { seed: config.seed, replications, tau_true, config: config.clone(), summaries, records })
}
