//! Exhaustive ground truth for small designs: sign enumeration of
//! `max yᵀC⁻¹y`, the l1/l2 duality identity, and a λ sweep.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{build_gram, data_scale, DesignAssignment, DesignError, Normalization, WeightVector};
use crate::numerics::{invert_spd, norm1, norm2, Matrix, NumericsError, SymMatrix};

pub const DEFAULT_CAP: usize = 20;

/// Relative gap below which two enumerated values count as tied.
const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("{n} units exceed the enumeration cap of {cap}")]
    TooLarge { n: usize, cap: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error("invalid lambda grid: {0}")]
    InvalidGrid(String),
}

pub type Result<T> = std::result::Result<T, OracleError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    /// Maximizer with the first sign fixed to `+1`.
    pub best_signs: DesignAssignment,
    pub best_value: f64,
    /// `|W*|` scaled to l1 norm two.
    pub exact_weights: WeightVector,
    /// `W* = C⁻¹y*/‖C⁻¹y*‖₁`
    pub signed_weights: Vec<f64>,
    /// `W*ᵀ C W*`, which equals `1 / best_value` at the optimum.
    pub min_objective: f64,
    pub evaluations: u64,
    /// Another pattern reached the best value within rounding.
    pub tie: bool,
}

fn check_cap(n: usize, cap: usize) -> Result<()> {
    if n > cap || n >= 63 {
        return Err(OracleError::TooLarge { n, cap });
    }
    Ok(())
}

/// Visits every `y` with `y₁ = +1` in Gray-code order. `visit` receives the
/// running sign vector and the coordinate flipped to reach it (`None` first).
fn gray_walk(n: usize, mut visit: impl FnMut(&[f64], Option<usize>)) -> u64 {
    let mut y = vec![1.0; n];
    visit(&y, None);
    let total: u64 = 1 << (n - 1);
    for step in 1..total {
        let k = step.trailing_zeros() as usize + 1;
        y[k] = -y[k];
        visit(&y, Some(k));
    }
    total
}

/// Maximizes `yᵀ M y` over sign vectors with `M` given, keeping `My` updated
/// incrementally.
fn enumerate_max(m: &SymMatrix) -> (Vec<f64>, f64, u64, bool) {
    let n = m.order();
    let mut my = m.matvec(&vec![1.0; n]);
    let mut value = my.iter().sum::<f64>();
    let mut best = (vec![1.0; n], value);
    let mut tie = false;
    let evaluations = gray_walk(n, |y, flipped| {
        if let Some(k) = flipped {
            // y_k has just changed sign; old value was -y[k]
            let old = -y[k];
            value += -4.0 * old * my[k] + 4.0 * m.get(k, k);
            let col = m.row(k);
            for (v, c) in my.iter_mut().zip(col) {
                *v -= 2.0 * old * c;
            }
            let gap = value - best.1;
            let tol = TIE_TOL * best.1.abs().max(value.abs());
            if gap > tol {
                best = (y.to_vec(), value);
                tie = false;
            } else if gap.abs() <= tol {
                tie = true;
            }
        }
    });
    (best.0, best.1, evaluations, tie)
}

/// Global maximizer of `yᵀC⁻¹y` by enumerating `2^(N−1)` sign vectors.
pub fn brute_force_design(c: &SymMatrix, cap: usize) -> Result<OracleResult> {
    let n = c.order();
    check_cap(n, cap)?;
    let m = invert_spd(c)?;
    let (y, _, evaluations, tie) = enumerate_max(&m);
    let best_value = m.quad_form(&y);
    let my = m.matvec(&y);
    let l1 = norm1(&my);
    let signed: Vec<f64> = my.iter().map(|v| v / l1).collect();
    let min_objective = c.quad_form(&signed);
    let best_signs = DesignAssignment::from_real(&y)?;
    Ok(OracleResult {
        best_signs,
        best_value,
        exact_weights: WeightVector {
            values: signed.iter().map(|v| 2.0 * v.abs()).collect(),
            normalization: Normalization::L1Two,
        },
        signed_weights: signed,
        min_objective,
        evaluations,
        tie,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualityCheck {
    /// `max_y ‖Tᵀy‖₂`
    pub lhs: f64,
    /// `‖T x*‖₁` at `x* = Tᵀy*/‖Tᵀy*‖₂`
    pub rhs: f64,
    pub holds: bool,
}

/// Evaluates both sides of `max_{‖x‖₂=1} ‖Tx‖₁ = max_y ‖Tᵀy‖₂` by enumeration.
pub fn check_l1_duality(t: &SymMatrix, tol: f64, cap: usize) -> Result<DualityCheck> {
    let n = t.order();
    check_cap(n, cap)?;
    let tm = t.as_matrix();
    let mut z = tm.tr_matvec(&vec![1.0; n]);
    let mut best = (vec![1.0; n], norm2(&z));
    gray_walk(n, |y, flipped| {
        if let Some(k) = flipped {
            let old = -y[k];
            for (zi, tk) in z.iter_mut().zip(tm.row(k)) {
                *zi -= 2.0 * old * tk;
            }
            let v = norm2(&z);
            if v > best.1 {
                best = (y.to_vec(), v);
            }
        }
    });
    let zt = tm.tr_matvec(&best.0);
    let lhs = norm2(&zt);
    let x: Vec<f64> = zt.iter().map(|v| v / lhs).collect();
    let rhs = norm1(&tm.matvec(&x));
    Ok(DualityCheck { lhs, rhs, holds: (lhs - rhs).abs() <= tol * (1.0 + lhs.abs()) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    /// Oracle pattern with the first sign fixed to `+1`.
    pub signs: Vec<i8>,
    /// `|1ᵀW*|` for `W*` normalized to `‖W*‖₁ = 1`.
    pub imbalance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSweep {
    pub points: Vec<SweepPoint>,
    /// Smallest grid λ from which the pattern no longer changes.
    pub lambda0: f64,
    /// `|1ᵀW*| / ‖W*‖₁` at the largest λ.
    pub final_imbalance: f64,
}

/// `10⁰ … 10⁸`, each times `tr(YYᵀ)/N`.
pub fn default_lambda_grid(y: &Matrix) -> Vec<f64> {
    let s = data_scale(y);
    (0..=8).map(|k| 10f64.powi(k) * s).collect()
}

/// Oracle pattern and weights of `C = YYᵀ + σI + λ11ᵀ` along `grid`.
pub fn lambda_sweep(y: &Matrix, sigma: f64, grid: &[f64], cap: usize) -> Result<LambdaSweep> {
    check_cap(y.nrows(), cap)?;
    if grid.is_empty() {
        return Err(OracleError::InvalidGrid("empty grid".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) || grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(OracleError::InvalidGrid("grid must be finite, non-negative and increasing".into()));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let c = build_gram(y, sigma, lambda)?;
        let r = brute_force_design(&c, cap)?;
        let imbalance = r.signed_weights.iter().sum::<f64>().abs();
        points.push(SweepPoint { lambda, signs: r.best_signs.signs().to_vec(), imbalance });
    }
    let last = points.last().expect("non-empty").signs.clone();
    let first_stable = points.iter().rposition(|p| p.signs != last).map_or(0, |i| i + 1);
    let final_imbalance = points.last().expect("non-empty").imbalance;
    Ok(LambdaSweep { lambda0: points[first_stable].lambda, points, final_imbalance })
}
