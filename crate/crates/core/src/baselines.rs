//! Comparison designs: coin-flip assignment, best-of-K rerandomization and
//! the single-treated-unit synthetic control.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::balance_qp::{fit_sc_weights, QpError, QpSolveStats};
use crate::design::{DesignAssignment, WeightVector};
use crate::numerics::Matrix;
use crate::panel::PanelData;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BalanceMetric {
    /// `(1/T) Σₜ (mean_treated Yₜ − mean_control Yₜ)²`
    UniformMeanGap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerandSpec {
    pub draws: usize,
    pub seed: u64,
    pub balance_metric: BalanceMetric,
}

impl RerandSpec {
    pub fn new(draws: usize, seed: u64) -> Self {
        Self { draws, seed, balance_metric: BalanceMetric::UniformMeanGap }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerandOutcome {
    pub assignment: DesignAssignment,
    pub weights: WeightVector,
    pub metric: f64,
    /// Metric of every draw in order.
    pub draw_metrics: Vec<f64>,
}

/// i.i.d. fair signs, redrawn until both groups are non-empty; units with
/// sign `+1` are treated.
fn draw_split(n: usize, rng: &mut ChaCha8Rng) -> DesignAssignment {
    assert!(n >= 2, "need at least 2 units");
    loop {
        let signs: Vec<i8> = (0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
        let a = DesignAssignment::with_treated_label(signs, 1).expect("valid signs");
        if a.is_split() {
            return a;
        }
    }
}

/// Coin-flip design with uniform within-group weights.
pub fn random_design(n_units: usize, seed: u64) -> (DesignAssignment, WeightVector) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = draw_split(n_units, &mut rng);
    let w = WeightVector::uniform(&a).expect("split assignment");
    (a, w)
}

/// Uniform-weight squared mean gap over the columns of `y_pre`.
pub fn mean_gap_metric(y_pre: &Matrix, assignment: &DesignAssignment) -> f64 {
    let mask = assignment.treated_mask().expect("oriented assignment");
    let nt = mask.iter().filter(|&&m| m).count() as f64;
    let nc = mask.len() as f64 - nt;
    let t = y_pre.ncols();
    let mut gap = vec![0.0; t];
    for (i, &m) in mask.iter().enumerate() {
        let c = if m { 1.0 / nt } else { -1.0 / nc };
        for (g, y) in gap.iter_mut().zip(y_pre.row(i)) {
            *g += c * y;
        }
    }
    gap.iter().map(|g| g * g).sum::<f64>() / t.max(1) as f64
}

/// Best of `spec.draws` coin-flip designs by the balance metric. Draws come
/// from one stream, so a longer run extends a shorter one with the same seed.
pub fn rerandomize(y_pre: &Matrix, spec: &RerandSpec) -> RerandOutcome {
    let n = y_pre.nrows();
    let draws = spec.draws.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut best: Option<(DesignAssignment, f64)> = None;
    let mut draw_metrics = Vec::with_capacity(draws);
    for _ in 0..draws {
        let a = draw_split(n, &mut rng);
        let m = match spec.balance_metric {
            BalanceMetric::UniformMeanGap => mean_gap_metric(y_pre, &a),
        };
        draw_metrics.push(m);
        if best.as_ref().is_none_or(|(_, b)| m < *b) {
            best = Some((a, m));
        }
    }
    let (assignment, metric) = best.expect("at least one draw");
    let weights = WeightVector::uniform(&assignment).expect("split assignment");
    RerandOutcome { assignment, weights, metric, draw_metrics }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScDesign {
    pub treated_unit: usize,
    pub assignment: DesignAssignment,
    /// Treated unit weight one, donors on the simplex.
    pub weights: WeightVector,
    pub stats: QpSolveStats,
}

/// Synthetic control for one uniformly drawn treated unit, with donor
/// weights fitted on the pre-periods.
pub fn classic_sc(panel: &PanelData, seed: u64) -> Result<ScDesign, QpError> {
    let n = panel.n_units();
    if n < 2 {
        return Err(QpError::InvalidInput(format!("need at least 2 units, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let treated_unit = rng.random_range(0..n);
    let (weights, stats) = fit_sc_weights(&panel.pre_matrix(), treated_unit)?;
    let assignment = DesignAssignment::from_treated_units(n, &[treated_unit]).expect("valid unit");
    Ok(ScDesign { treated_unit, assignment, weights, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::test_support::random_matrix;

    #[test]
    fn two_units_always_split() {
        for seed in 0..50 {
            let (a, w) = random_design(2, seed);
            assert!(a.is_split());
            assert_eq!(w.values, vec![1.0, 1.0]);
        }
    }

    #[test]
    fn deterministic_for_seed() {
        assert_eq!(random_design(9, 4), random_design(9, 4));
        let p = PanelData::unlabeled(random_matrix(&mut ChaCha8Rng::seed_from_u64(0), 6, 5), 3).unwrap();
        assert_eq!(classic_sc(&p, 7).unwrap(), classic_sc(&p, 7).unwrap());
    }

    #[test]
    fn treated_fraction_is_half() {
        let mut treated = 0usize;
        for seed in 0..10_000 {
            treated += random_design(10, seed).0.treated_units().unwrap().len();
        }
        let frac = treated as f64 / 100_000.0;
        assert!((0.45..=0.55).contains(&frac), "{frac}");
    }

    #[test]
    fn single_draw_equals_random_design() {
        let y = random_matrix(&mut ChaCha8Rng::seed_from_u64(1), 8, 4);
        let r = rerandomize(&y, &RerandSpec::new(1, 33));
        let (a, w) = random_design(8, 33);
        assert_eq!(r.assignment, a);
        assert_eq!(r.weights, w);
    }

    #[test]
    fn best_draw_is_minimal_and_nested() {
        let y = random_matrix(&mut ChaCha8Rng::seed_from_u64(2), 12, 6);
        let short = rerandomize(&y, &RerandSpec::new(50, 9));
        let long = rerandomize(&y, &RerandSpec::new(500, 9));
        assert!(short.draw_metrics.iter().all(|&m| short.metric <= m));
        assert_eq!(&long.draw_metrics[..50], &short.draw_metrics[..]);
        assert!(long.metric <= short.metric);
        assert_eq!(mean_gap_metric(&y, &short.assignment), short.metric);
    }

    #[test]
    fn sc_two_units_and_duplicates() {
        let y = Matrix::from_rows(&[[1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0]]).unwrap();
        let p = PanelData::unlabeled(y, 3).unwrap();
        let sc = classic_sc(&p, 1).unwrap();
        assert_eq!(sc.weights.values, vec![1.0, 1.0]);
        assert!(sc.stats.objective.abs() <= 1e-12);
        sc.weights.validate(&sc.assignment).unwrap();
    }
}
