//! Linear latent factor panels `Yᵢₜ = γᵢᵀvₜ + eᵢₜ` and realizable instances
//! that admit an exactly balancing signed weight vector.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{orient, DesignAssignment, Normalization, WeightVector};
use crate::numerics::{dot, norm2, Matrix};
use crate::panel::{PanelData, PanelError};

pub const REALIZABLE_MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimulateError {
    #[error("invalid simulation spec: {0}")]
    InvalidSpec(String),
    #[error("no weights within [{epsilon}, 1/{epsilon}] after {attempts} attempts")]
    InfeasibleEpsilon { epsilon: f64, attempts: usize },
    #[error(transparent)]
    Panel(#[from] PanelError),
}

pub type Result<T> = std::result::Result<T, SimulateError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `vₜ ~ N(0, I)` independently over time.
    PureRandom,
    /// `vₜ = (t − (T+S)/2)·1 + ε`.
    TimeVarying,
    /// `v₁ ~ N(0, I)`, `vₜ₊₁ = a·vₜ + b·1 + ε`.
    Ar1,
}

impl FromStr for Regime {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "random" | "pure_random" | "purerandom" => Ok(Regime::PureRandom),
            "trend" | "time_varying" | "timevarying" => Ok(Regime::TimeVarying),
            "ar1" | "ar" => Ok(Regime::Ar1),
            other => Err(format!("unknown regime {other:?} (expected random, trend or ar1)")),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::PureRandom => "random",
            Regime::TimeVarying => "trend",
            Regime::Ar1 => "ar1",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorModelSpec {
    pub n_units: usize,
    pub pre_periods: usize,
    pub post_periods: usize,
    pub latent_dim: usize,
    pub regime: Regime,
    pub tau: f64,
    /// Idiosyncratic outcome noise.
    pub noise_sd: f64,
    /// Innovation scale of the time factors.
    pub factor_noise_sd: f64,
    pub ar_coef: f64,
    pub ar_drift: f64,
    pub seed: u64,
}

impl Default for FactorModelSpec {
    fn default() -> Self {
        Self {
            n_units: 10,
            pre_periods: 10,
            post_periods: 10,
            latent_dim: 8,
            regime: Regime::PureRandom,
            tau: 1.0,
            noise_sd: 1.0,
            factor_noise_sd: 1.0,
            ar_coef: 0.7,
            ar_drift: 1.0,
            seed: 0,
        }
    }
}

impl FactorModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_units < 2 {
            return Err(SimulateError::InvalidSpec(format!("n_units must be >= 2, got {}", self.n_units)));
        }
        if self.pre_periods < 1 || self.post_periods < 1 || self.latent_dim < 1 {
            return Err(SimulateError::InvalidSpec("pre_periods, post_periods and latent_dim must be >= 1".into()));
        }
        let reals = [
            ("tau", self.tau),
            ("noise_sd", self.noise_sd),
            ("factor_noise_sd", self.factor_noise_sd),
            ("ar_coef", self.ar_coef),
            ("ar_drift", self.ar_drift),
        ];
        for (name, v) in reals {
            if !v.is_finite() {
                return Err(SimulateError::InvalidSpec(format!("{name} must be finite")));
            }
        }
        if self.noise_sd < 0.0 || self.factor_noise_sd < 0.0 {
            return Err(SimulateError::InvalidSpec("noise scales must be non-negative".into()));
        }
        Ok(())
    }

    /// `|ar_coef| ≥ 1` makes the AR(1) factors explode.
    pub fn is_explosive(&self) -> bool {
        self.regime == Regime::Ar1 && self.ar_coef.abs() >= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedPanel {
    /// Untreated potential outcomes.
    pub panel: PanelData,
    pub tau: f64,
    /// Unit loadings, N × L.
    pub loadings: Matrix,
    /// Time factors, (T+S) × L.
    pub factors: Matrix,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn factor_path(spec: &FactorModelSpec, rng: &mut ChaCha8Rng) -> Matrix {
    let periods = spec.pre_periods + spec.post_periods;
    let l = spec.latent_dim;
    let s = spec.factor_noise_sd;
    let mut f = Matrix::zeros(periods, l);
    match spec.regime {
        Regime::PureRandom => {
            for t in 0..periods {
                for k in 0..l {
                    f[(t, k)] = normal(rng);
                }
            }
        }
        Regime::TimeVarying => {
            let mid = periods as f64 / 2.0;
            for t in 0..periods {
                for k in 0..l {
                    f[(t, k)] = (t + 1) as f64 - mid + s * normal(rng);
                }
            }
        }
        Regime::Ar1 => {
            for k in 0..l {
                f[(0, k)] = normal(rng);
            }
            for t in 1..periods {
                for k in 0..l {
                    f[(t, k)] = spec.ar_coef * f[(t - 1, k)] + spec.ar_drift + s * normal(rng);
                }
            }
        }
    }
    f
}

/// Untreated outcomes under the factor model; deterministic in `spec.seed`.
pub fn generate_panel(spec: &FactorModelSpec) -> Result<SimulatedPanel> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_units;
    let l = spec.latent_dim;
    let loadings = Matrix::from_fn(n, l, |_, _| normal(&mut rng));
    let factors = factor_path(spec, &mut rng);
    let periods = factors.nrows();
    let mut y = loadings.matmul(&factors.transpose());
    for i in 0..n {
        for t in 0..periods {
            y[(i, t)] += spec.noise_sd * normal(&mut rng);
        }
    }
    let panel = PanelData::unlabeled(y, spec.pre_periods)?;
    Ok(SimulatedPanel { panel, tau: spec.tau, loadings, factors })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizableSpec {
    pub n_units: usize,
    pub latent_dim: usize,
    pub pre_periods: usize,
    pub post_periods: usize,
    pub epsilon: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl RealizableSpec {
    pub fn new(n_units: usize, latent_dim: usize, pre_periods: usize, epsilon: f64, noise_sd: f64, seed: u64) -> Self {
        Self { n_units, latent_dim, pre_periods, post_periods: 10, epsilon, noise_sd, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizableInstance {
    /// Outcomes `Y = 1δᵀ + μΘᵀ + noise`; `loadings` holds μ, `factors` holds Θ.
    pub panel: SimulatedPanel,
    pub true_assignment: DesignAssignment,
    /// Ground-truth weights rescaled to group-sums-one.
    pub true_weights: WeightVector,
    /// Unsigned weights with `Σ wᵢDᵢ = 0` and `‖w‖² = N`.
    pub raw_weights: Vec<f64>,
    pub epsilon_bound: f64,
}

impl RealizableInstance {
    /// `v = w ∘ D`
    pub fn balancing_vector(&self) -> Vec<f64> {
        self.raw_weights.iter().zip(self.true_assignment.signs()).map(|(w, &d)| w * d as f64).collect()
    }
}

/// Signs and weights with equal group mass, `‖w‖² = N` and every weight in
/// `[ε, 1/ε]`, by rejection sampling.
fn draw_balanced_weights(n: usize, epsilon: f64, rng: &mut ChaCha8Rng) -> Result<(Vec<i8>, Vec<f64>)> {
    let hi = 1.0 / epsilon;
    for _ in 0..REALIZABLE_MAX_ATTEMPTS {
        let d: Vec<i8> = (0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(epsilon..=hi)).collect();
        let (mut sp, mut sm) = (0.0, 0.0);
        for (&di, &w) in d.iter().zip(&raw) {
            if di > 0 {
                sp += w;
            } else {
                sm += w;
            }
        }
        if sp == 0.0 || sm == 0.0 {
            continue;
        }
        let mut w: Vec<f64> = d.iter().zip(&raw).map(|(&di, &v)| if di > 0 { v / sp } else { v / sm }).collect();
        let scale = (n as f64).sqrt() / norm2(&w);
        w.iter_mut().for_each(|v| *v *= scale);
        if w.iter().all(|&v| v >= epsilon && v <= hi) {
            return Ok((d, w));
        }
    }
    Err(SimulateError::InfeasibleEpsilon { epsilon, attempts: REALIZABLE_MAX_ATTEMPTS })
}

/// Removes from `x` its components along each vector of `basis` (assumed
/// orthonormal), twice for numerical safety.
fn orthogonalize(x: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let p = dot(x, b);
            x.iter_mut().zip(b).for_each(|(xi, bi)| *xi -= p * bi);
        }
    }
}

/// A panel whose latent loadings are exactly balanced by a known signed
/// weight vector `v = w ∘ D`: the loadings have orthonormal columns spanning
/// a subspace orthogonal to `v`, plus an all-ones time effect.
pub fn generate_realizable(spec: &RealizableSpec) -> Result<RealizableInstance> {
    let n = spec.n_units;
    let l = spec.latent_dim;
    if n < 2 || l < 1 || l > n - 1 {
        return Err(SimulateError::InvalidSpec(format!("need 1 <= latent_dim <= n_units - 1, got L={l}, N={n}")));
    }
    if !(spec.epsilon > 0.0 && spec.epsilon <= 1.0) {
        return Err(SimulateError::InvalidSpec(format!("epsilon must lie in (0, 1], got {}", spec.epsilon)));
    }
    if spec.pre_periods < 1 || spec.post_periods < 1 {
        return Err(SimulateError::InvalidSpec("pre_periods and post_periods must be >= 1".into()));
    }
    if !(spec.noise_sd.is_finite() && spec.noise_sd >= 0.0) {
        return Err(SimulateError::InvalidSpec("noise_sd must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (d, w) = draw_balanced_weights(n, spec.epsilon, &mut rng)?;
    let v: Vec<f64> = w.iter().zip(&d).map(|(wi, &di)| wi * di as f64).collect();
    let vn = norm2(&v);
    let mut basis = vec![v.iter().map(|x| x / vn).collect::<Vec<_>>()];
    let mut columns = Vec::with_capacity(l);
    while columns.len() < l {
        let mut x: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        orthogonalize(&mut x, &basis);
        let xn = norm2(&x);
        if xn < 1e-8 {
            continue;
        }
        x.iter_mut().for_each(|xi| *xi /= xn);
        basis.push(x.clone());
        columns.push(x);
    }
    let root_n = (n as f64).sqrt();
    let mu = Matrix::from_fn(n, l, |i, k| columns[k][i] * root_n);

    let periods = spec.pre_periods + spec.post_periods;
    let delta: Vec<f64> = (0..periods).map(|_| normal(&mut rng)).collect();
    let theta = Matrix::from_fn(periods, l, |_, _| normal(&mut rng));
    let mut y = mu.matmul(&theta.transpose());
    for i in 0..n {
        for t in 0..periods {
            y[(i, t)] += delta[t] + spec.noise_sd * normal(&mut rng);
        }
    }
    let panel = PanelData::unlabeled(y, spec.pre_periods)?;
    let assignment = orient(&DesignAssignment::new(d.clone()).expect("signs are +-1"));
    let group_sum: f64 = w.iter().zip(&d).filter(|(_, &di)| di > 0).map(|(wi, _)| wi).sum();
    let true_weights =
        WeightVector { values: w.iter().map(|x| x / group_sum).collect(), normalization: Normalization::GroupSumsOne };
    Ok(RealizableInstance {
        panel: SimulatedPanel { panel, tau: 0.0, loadings: mu, factors: theta },
        true_assignment: assignment,
        true_weights,
        raw_weights: w,
        epsilon_bound: spec.epsilon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn jacobi_rank(m: &Matrix) -> usize {
        let g = m.row_gram();
        let vals = crate::numerics::test_support::jacobi_eigenvalues(&g);
        let top = vals.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
        vals.iter().filter(|v| v.abs() > 1e-10 * top.max(1e-300)).count()
    }

    #[test]
    fn rank_one_without_noise() {
        let spec = FactorModelSpec { n_units: 6, latent_dim: 1, noise_sd: 0.0, ..Default::default() };
        let sim = generate_panel(&spec).unwrap();
        assert_eq!(sim.panel.outcomes().nrows(), 6);
        assert_eq!(sim.panel.outcomes().ncols(), 20);
        assert!(jacobi_rank(sim.panel.outcomes()) <= 1);
    }

    #[test]
    fn ar1_recursion_is_exact_without_noise() {
        let spec = FactorModelSpec {
            regime: Regime::Ar1,
            noise_sd: 0.0,
            factor_noise_sd: 0.0,
            latent_dim: 3,
            ..Default::default()
        };
        let sim = generate_panel(&spec).unwrap();
        for k in 0..3 {
            assert_eq!(sim.factors[(1, k)], 0.7 * sim.factors[(0, k)] + 1.0);
        }
        // drifts toward b / (1 - a)
        let last = sim.factors.nrows() - 1;
        let fixed = 1.0 / 0.3;
        for k in 0..3 {
            assert!((sim.factors[(last, k)] - fixed).abs() < (sim.factors[(0, k)] - fixed).abs());
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        for regime in [Regime::PureRandom, Regime::TimeVarying, Regime::Ar1] {
            let spec = FactorModelSpec { regime, seed: 17, ..Default::default() };
            assert_eq!(generate_panel(&spec).unwrap(), generate_panel(&spec).unwrap());
        }
    }

    #[test]
    fn trend_slope_is_near_one() {
        let mut slopes = Vec::new();
        for seed in 0..100 {
            let spec = FactorModelSpec { regime: Regime::TimeVarying, latent_dim: 1, seed, ..Default::default() };
            let f = generate_panel(&spec).unwrap().factors.column(0);
            let n = f.len() as f64;
            let tbar = (n + 1.0) / 2.0;
            let fbar = f.iter().sum::<f64>() / n;
            let (mut sxy, mut sxx) = (0.0, 0.0);
            for (t, v) in f.iter().enumerate() {
                let dt = (t + 1) as f64 - tbar;
                sxy += dt * (v - fbar);
                sxx += dt * dt;
            }
            slopes.push(sxy / sxx);
        }
        let mean = slopes.iter().sum::<f64>() / slopes.len() as f64;
        assert!((mean - 1.0).abs() <= 0.2, "mean slope {mean}");
    }

    #[test]
    fn four_unit_balance_example() {
        let v = [1.0, 1.0, -1.0, -1.0];
        let basis = vec![v.iter().map(|x| x / 2.0).collect::<Vec<_>>()];
        let mut col = vec![0.3, -1.2, 0.7, 2.0];
        orthogonalize(&mut col, &basis);
        assert!(dot(&col, &v).abs() < 1e-15);
    }

    #[test]
    fn noiseless_realizable_is_exactly_balanced() {
        let inst = generate_realizable(&RealizableSpec::new(8, 6, 50, 0.2, 0.0, 5)).unwrap();
        let v = inst.balancing_vector();
        let y = inst.panel.panel.pre_matrix();
        let yv = y.tr_matvec(&v);
        let scale = y.frobenius_norm().powi(2) * dot(&v, &v);
        assert!(dot(&yv, &yv) <= 1e-18 * scale);
    }

    #[test]
    fn infeasible_epsilon_reports() {
        let err = generate_realizable(&RealizableSpec::new(5, 2, 10, 1.0, 0.0, 0)).unwrap_err();
        assert!(matches!(err, SimulateError::InfeasibleEpsilon { .. }));
        assert!(generate_realizable(&RealizableSpec::new(5, 5, 10, 0.5, 0.0, 0)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn realizable_invariants(seed in any::<u64>(), n in 3usize..12, eps in 0.05f64..0.5) {
            let l = n - 2;
            let inst = generate_realizable(&RealizableSpec::new(n, l.max(1), 20, eps, 0.05, seed)).unwrap();
            let v = inst.balancing_vector();
            prop_assert!(v.iter().sum::<f64>().abs() <= 1e-12);
            let w = &inst.raw_weights;
            prop_assert!((dot(w, w) - n as f64).abs() <= 1e-10);
            prop_assert!(w.iter().all(|&x| x >= eps && x <= 1.0 / eps));
            let bal = inst.panel.loadings.tr_matvec(&v);
            prop_assert!(bal.iter().all(|b| b.abs() <= 1e-12));
            inst.true_weights.validate(&inst.true_assignment).unwrap();
        }
    }
}
