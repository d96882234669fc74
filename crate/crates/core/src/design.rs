//! Treatment designs by generalized power iteration on sign vectors.
//!
//! The design problem maximizes `yᵀ C⁻¹ y` over `y ∈ {−1,+1}ᴺ` with
//! `C = YYᵀ + αI + λ11ᵀ` built over units. Two updates are provided:
//! plain SPCD, `y ← sgn[(C⁻¹ + βI) y]`, and NormSPCD, which first divides
//! the iterate by `d = √diag(C⁻¹)`.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{dot, extreme_eigenpair, invert_spd, norm1, Extreme, Matrix, NumericsError, SymMatrix};

/// Diagonal entries of `C⁻¹` at or below this make NormSPCD ill-defined.
pub const DEGENERATE_DIAG: f64 = 1e-14;

/// Eigenvector entries smaller than this fraction of the largest are read as zero.
const EIGEN_ZERO_FRACTION: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DesignError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid design configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite outcome at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("diag(C^-1) entry {index} is {value:e}")]
    DegenerateDiagonal { index: usize, value: f64 },
    #[error("weight vector has l1 norm {0:e}")]
    DegenerateWeights(f64),
    #[error("weights violate {0}")]
    NormalizationMismatch(String),
}

pub type Result<T> = std::result::Result<T, DesignError>;

/// `+1` for non-negative input, `−1` otherwise.
pub fn sgn(x: f64) -> i8 {
    if x >= 0.0 {
        1
    } else {
        -1
    }
}

/// A ridge or penalty level, either absolute or relative to the data scale
/// `tr(YYᵀ)/N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hyper {
    Scaled(f64),
    Fixed(f64),
}

impl Hyper {
    pub fn raw(self) -> f64 {
        match self {
            Hyper::Scaled(v) | Hyper::Fixed(v) => v,
        }
    }

    pub fn resolve(self, scale: f64) -> f64 {
        match self {
            Hyper::Scaled(v) => v * scale,
            Hyper::Fixed(v) => v,
        }
    }
}

/// Parses `0.5` as an absolute level and `0.5x` as a multiple of `tr(YYᵀ)/N`.
impl FromStr for Hyper {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        let (body, scaled) = match s.strip_suffix(['x', 'X']) {
            Some(b) => (b, true),
            None => (s, false),
        };
        let v: f64 = body.parse().map_err(|_| format!("not a number: {s:?}"))?;
        Ok(if scaled { Hyper::Scaled(v) } else { Hyper::Fixed(v) })
    }
}

impl fmt::Display for Hyper {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Hyper::Scaled(v) => write!(f, "{v}x"),
            Hyper::Fixed(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Spcd,
    NormSpcd,
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "spcd" => Ok(Variant::Spcd),
            "normspcd" | "norm-spcd" | "norm_spcd" => Ok(Variant::NormSpcd),
            other => Err(format!("unknown variant {other:?} (expected spcd or normspcd)")),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Spcd => "spcd",
            Variant::NormSpcd => "normspcd",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignConfig {
    pub alpha: Hyper,
    pub lambda: Hyper,
    pub beta: f64,
    /// Ridge weight on `‖w‖²` in the weight QP.
    pub sigma: f64,
    pub variant: Variant,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self {
            alpha: Hyper::Scaled(1e-3),
            lambda: Hyper::Scaled(100.0),
            beta: 0.0,
            sigma: 0.0,
            variant: Variant::NormSpcd,
            max_iters: 100,
            seed: 0,
        }
    }
}

impl DesignConfig {
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("alpha", self.alpha.raw()),
            ("lambda", self.lambda.raw()),
            ("beta", self.beta),
            ("sigma", self.sigma),
        ];
        for (name, v) in checks {
            if !v.is_finite() || v < 0.0 {
                return Err(DesignError::InvalidConfig(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.alpha.raw() == 0.0 && self.lambda.raw() == 0.0 {
            return Err(DesignError::InvalidConfig("alpha and lambda cannot both be zero".into()));
        }
        if self.max_iters == 0 {
            return Err(DesignError::InvalidConfig("max_iters must be at least 1".into()));
        }
        Ok(())
    }

    /// Absolute `(α, λ)` for the given outcomes.
    pub fn resolve(&self, y: &Matrix) -> (f64, f64) {
        let s = data_scale(y);
        (self.alpha.resolve(s), self.lambda.resolve(s))
    }
}

/// `tr(YYᵀ)/N`, or 1 for an all-zero matrix.
pub fn data_scale(y: &Matrix) -> f64 {
    let n = y.nrows().max(1) as f64;
    let s = y.as_slice().iter().map(|v| v * v).sum::<f64>() / n;
    if s > 0.0 {
        s
    } else {
        1.0
    }
}

/// Sign vector with an optional treated label.
///
/// `treated_label` is set once the assignment has been oriented (or built
/// with an explicit treated group); units whose sign equals it are treated.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DesignAssignment {
    signs: Vec<i8>,
    treated_label: Option<i8>,
}

impl DesignAssignment {
    pub fn new(signs: Vec<i8>) -> Result<Self> {
        if signs.len() < 2 {
            return Err(DesignError::InvalidAssignment(format!("need at least 2 units, got {}", signs.len())));
        }
        if let Some(bad) = signs.iter().find(|&&s| s != 1 && s != -1) {
            return Err(DesignError::InvalidAssignment(format!("sign entry {bad} is not +1 or -1")));
        }
        Ok(Self { signs, treated_label: None })
    }

    /// Signs of a real vector with `sgn(0) = +1`.
    pub fn from_real(v: &[f64]) -> Result<Self> {
        Self::new(v.iter().map(|&x| sgn(x)).collect())
    }

    /// Assignment whose treated group is the set of units with sign `label`.
    pub fn with_treated_label(signs: Vec<i8>, label: i8) -> Result<Self> {
        if label != 1 && label != -1 {
            return Err(DesignError::InvalidAssignment(format!("treated label {label} is not +1 or -1")));
        }
        let mut a = Self::new(signs)?;
        a.treated_label = Some(label);
        Ok(a)
    }

    /// Assignment with exactly the listed units treated.
    pub fn from_treated_units(n: usize, treated: &[usize]) -> Result<Self> {
        let mut signs = vec![1i8; n];
        for &i in treated {
            if i >= n {
                return Err(DesignError::InvalidAssignment(format!("unit {i} out of range for {n} units")));
            }
            signs[i] = -1;
        }
        Self::with_treated_label(signs, -1)
    }

    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn as_real(&self) -> Vec<f64> {
        self.signs.iter().map(|&s| s as f64).collect()
    }

    pub fn is_oriented(&self) -> bool {
        self.treated_label.is_some()
    }

    pub fn treated_label(&self) -> Option<i8> {
        self.treated_label
    }

    pub fn flipped(&self) -> Self {
        Self { signs: self.signs.iter().map(|s| -s).collect(), treated_label: self.treated_label.map(|l| -l) }
    }

    /// True if the sign vectors agree up to a global flip.
    pub fn same_partition(&self, other: &DesignAssignment) -> bool {
        self.signs.len() == other.signs.len()
            && (self.signs == other.signs || self.signs.iter().zip(&other.signs).all(|(a, b)| a == &-b))
    }

    /// Treated mask; `None` until oriented.
    pub fn treated_mask(&self) -> Option<Vec<bool>> {
        let label = self.treated_label?;
        Some(self.signs.iter().map(|&s| s == label).collect())
    }

    pub fn treated_units(&self) -> Option<Vec<usize>> {
        let label = self.treated_label?;
        Some((0..self.len()).filter(|&i| self.signs[i] == label).collect())
    }

    pub fn control_units(&self) -> Option<Vec<usize>> {
        let label = self.treated_label?;
        Some((0..self.len()).filter(|&i| self.signs[i] != label).collect())
    }

    /// Both groups non-empty.
    pub fn is_split(&self) -> bool {
        self.signs.contains(&1) && self.signs.contains(&-1)
    }
}

/// Marks the minority group as treated: treated label `−sgn(Σy)`. On a tie
/// the group containing the first unit is treated, so `y` and `−y` orient to
/// the same treated set.
pub fn orient(assignment: &DesignAssignment) -> DesignAssignment {
    let sum: i64 = assignment.signs.iter().map(|&s| s as i64).sum();
    let label = match sum.cmp(&0) {
        std::cmp::Ordering::Greater => -1,
        std::cmp::Ordering::Less => 1,
        std::cmp::Ordering::Equal => assignment.signs[0],
    };
    DesignAssignment { signs: assignment.signs.clone(), treated_label: Some(label) }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Treated and control weights each sum to one.
    GroupSumsOne,
    /// Absolute values sum to two.
    L1Two,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub values: Vec<f64>,
    pub normalization: Normalization,
}

impl WeightVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Uniform weights `1/|group|` within each group of an oriented assignment.
    pub fn uniform(assignment: &DesignAssignment) -> Result<Self> {
        let mask = assignment
            .treated_mask()
            .ok_or_else(|| DesignError::InvalidAssignment("assignment is not oriented".into()))?;
        let nt = mask.iter().filter(|&&m| m).count();
        let nc = mask.len() - nt;
        if nt == 0 || nc == 0 {
            return Err(DesignError::InvalidAssignment("a group is empty".into()));
        }
        let values = mask.iter().map(|&m| if m { 1.0 / nt as f64 } else { 1.0 / nc as f64 }).collect();
        Ok(Self { values, normalization: Normalization::GroupSumsOne })
    }

    /// Checks non-negativity and the normalization against `assignment`.
    pub fn validate(&self, assignment: &DesignAssignment) -> Result<()> {
        if self.values.len() != assignment.len() {
            return Err(DesignError::DimensionMismatch { expected: assignment.len(), found: self.values.len() });
        }
        if let Some(v) = self.values.iter().find(|v| !v.is_finite() || **v < -1e-10) {
            return Err(DesignError::NormalizationMismatch(format!("non-negativity (entry {v})")));
        }
        match self.normalization {
            Normalization::L1Two => {
                let s = norm1(&self.values);
                if (s - 2.0).abs() > 1e-10 {
                    return Err(DesignError::NormalizationMismatch(format!("l1 norm two (sum {s})")));
                }
            }
            Normalization::GroupSumsOne => {
                let mask = assignment
                    .treated_mask()
                    .ok_or_else(|| DesignError::InvalidAssignment("assignment is not oriented".into()))?;
                let (mut st, mut sc) = (0.0, 0.0);
                for (v, m) in self.values.iter().zip(mask) {
                    if m {
                        st += v;
                    } else {
                        sc += v;
                    }
                }
                if (st - 1.0).abs() > 1e-8 || (sc - 1.0).abs() > 1e-8 {
                    return Err(DesignError::NormalizationMismatch(format!(
                        "group sums one (treated {st}, control {sc})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Rescales each group of `assignment` to sum to one.
    pub fn to_group_sums_one(&self, assignment: &DesignAssignment) -> Result<WeightVector> {
        if self.normalization == Normalization::GroupSumsOne {
            return Ok(self.clone());
        }
        let mask = assignment
            .treated_mask()
            .ok_or_else(|| DesignError::InvalidAssignment("assignment is not oriented".into()))?;
        if mask.len() != self.values.len() {
            return Err(DesignError::DimensionMismatch { expected: mask.len(), found: self.values.len() });
        }
        let (mut st, mut sc) = (0.0, 0.0);
        for (v, &m) in self.values.iter().zip(&mask) {
            if m {
                st += v.abs();
            } else {
                sc += v.abs();
            }
        }
        if !(st > 0.0 && sc > 0.0) {
            return Err(DesignError::DegenerateWeights(st.min(sc)));
        }
        let values = self.values.iter().zip(&mask).map(|(v, &m)| v.abs() / if m { st } else { sc }).collect();
        Ok(WeightVector { values, normalization: Normalization::GroupSumsOne })
    }

    /// Signed weights `W = w ∘ D` with `D = +1` on treated units.
    pub fn signed(&self, assignment: &DesignAssignment) -> Result<Vec<f64>> {
        let mask = assignment
            .treated_mask()
            .ok_or_else(|| DesignError::InvalidAssignment("assignment is not oriented".into()))?;
        Ok(self.values.iter().zip(mask).map(|(v, m)| if m { *v } else { -*v }).collect())
    }
}

/// Design weights from `C⁻¹y` along with a flag for sign disagreement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplifiedWeights {
    pub weights: WeightVector,
    /// `sgn(C⁻¹y) ≠ y` in at least one coordinate.
    pub sign_mismatch: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSolution {
    pub assignment: DesignAssignment,
    pub weights: WeightVector,
    pub iterations: usize,
    pub converged: bool,
    /// Objective (SPCD) or normalized potential (NormSPCD) of `y⁰, y¹, …`.
    pub objective_trace: Vec<f64>,
    /// Number of coordinates that one more update would change.
    pub fixed_point_residual: f64,
    /// The iteration revisited an earlier non-fixed state.
    pub cycled: bool,
    pub sign_mismatch: bool,
    pub alpha: f64,
    pub lambda: f64,
}

impl DesignSolution {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace always holds the initial objective")
    }
}

/// `C = YYᵀ + αI + λ11ᵀ` over the rows (units) of `y`.
pub fn build_gram(y: &Matrix, alpha: f64, lambda: f64) -> Result<SymMatrix> {
    if y.nrows() < 2 {
        return Err(DesignError::DimensionMismatch { expected: 2, found: y.nrows() });
    }
    if y.ncols() < 1 {
        return Err(DesignError::DimensionMismatch { expected: 1, found: 0 });
    }
    if let Some((row, col)) = y.first_non_finite() {
        return Err(DesignError::NonFinite { row, col });
    }
    let g = y.row_gram();
    Ok(SymMatrix::from_fn(y.nrows(), |i, j| g.get(i, j) + lambda + if i == j { alpha } else { 0.0 }))
}

/// Signs of the smallest eigenvector of `C` (unoriented).
pub fn spectral_init(c: &SymMatrix) -> Result<DesignAssignment> {
    let pair = extreme_eigenpair(c, Extreme::Smallest)?;
    let cutoff = EIGEN_ZERO_FRACTION * pair.vector.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let signs = pair.vector.iter().map(|&v| if v.abs() < cutoff { 1 } else { sgn(v) }).collect();
    DesignAssignment::new(signs)
}

fn normalizer(c_inv: &SymMatrix) -> Result<Vec<f64>> {
    c_inv
        .diag()
        .into_iter()
        .enumerate()
        .map(|(index, value)| {
            if value > DEGENERATE_DIAG {
                Ok(value.sqrt())
            } else {
                Err(DesignError::DegenerateDiagonal { index, value })
            }
        })
        .collect()
}

fn check_len(c_inv: &SymMatrix, y: &DesignAssignment) -> Result<()> {
    if c_inv.order() != y.len() {
        return Err(DesignError::DimensionMismatch { expected: c_inv.order(), found: y.len() });
    }
    Ok(())
}

/// Vector the update is applied to: `y` or `y ⊘ d`.
fn update_input(y: &DesignAssignment, d: Option<&[f64]>) -> Vec<f64> {
    match d {
        None => y.as_real(),
        Some(d) => y.signs.iter().zip(d).map(|(&s, di)| s as f64 / di).collect(),
    }
}

fn apply_shifted(c_inv: &SymMatrix, beta: f64, x: &[f64]) -> Vec<f64> {
    let mut out = c_inv.matvec(x);
    if beta != 0.0 {
        out.iter_mut().zip(x).for_each(|(o, xi)| *o += beta * xi);
    }
    out
}

/// One power step: SPCD `sgn[(C⁻¹ + βI) y]`, NormSPCD `sgn[(C⁻¹ + βI)(y ⊘ d)]`.
pub fn iterate_step(c_inv: &SymMatrix, y: &DesignAssignment, config: &DesignConfig) -> Result<DesignAssignment> {
    check_len(c_inv, y)?;
    let d = match config.variant {
        Variant::Spcd => None,
        Variant::NormSpcd => Some(normalizer(c_inv)?),
    };
    let x = update_input(y, d.as_deref());
    DesignAssignment::from_real(&apply_shifted(c_inv, config.beta, &x))
}

/// `f(y) = yᵀ(C⁻¹ + βI)y` for SPCD, the potential `ỹᵀ(C⁻¹ + βI)ỹ` with
/// `ỹ = y ⊘ d` for NormSPCD.
pub fn design_objective(c_inv: &SymMatrix, y: &DesignAssignment, config: &DesignConfig) -> Result<f64> {
    check_len(c_inv, y)?;
    let d = match config.variant {
        Variant::Spcd => None,
        Variant::NormSpcd => Some(normalizer(c_inv)?),
    };
    let x = update_input(y, d.as_deref());
    Ok(dot(&x, &apply_shifted(c_inv, config.beta, &x)))
}

/// `w = 2 C⁻¹y / ‖C⁻¹y‖₁`, stored as `|w|`.
pub fn simplified_weights(c_inv: &SymMatrix, y: &DesignAssignment) -> Result<SimplifiedWeights> {
    check_len(c_inv, y)?;
    let w = c_inv.matvec(&y.as_real());
    let l1 = norm1(&w);
    if !(l1 > 1e-14) {
        return Err(DesignError::DegenerateWeights(l1));
    }
    let sign_mismatch = w.iter().zip(&y.signs).any(|(&wi, &s)| sgn(wi) != s);
    let values = w.iter().map(|wi| 2.0 * wi.abs() / l1).collect();
    Ok(SimplifiedWeights { weights: WeightVector { values, normalization: Normalization::L1Two }, sign_mismatch })
}

/// Gram matrix and its inverse for one outcome matrix.
#[derive(Debug, Clone)]
pub struct DesignProblem {
    gram: SymMatrix,
    inverse: SymMatrix,
    alpha: f64,
    lambda: f64,
}

impl DesignProblem {
    pub fn new(y: &Matrix, config: &DesignConfig) -> Result<Self> {
        config.validate()?;
        let (alpha, lambda) = config.resolve(y);
        let gram = build_gram(y, alpha, lambda)?;
        let inverse = invert_spd(&gram)?;
        Ok(Self { gram, inverse, alpha, lambda })
    }

    pub fn from_gram(gram: SymMatrix) -> Result<Self> {
        let inverse = invert_spd(&gram)?;
        Ok(Self { gram, inverse, alpha: f64::NAN, lambda: f64::NAN })
    }

    pub fn gram(&self) -> &SymMatrix {
        &self.gram
    }

    pub fn inverse(&self) -> &SymMatrix {
        &self.inverse
    }

    pub fn n_units(&self) -> usize {
        self.gram.order()
    }

    pub fn spectral_init(&self) -> Result<DesignAssignment> {
        spectral_init(&self.gram)
    }

    pub fn solve(&self, config: &DesignConfig) -> Result<DesignSolution> {
        let start = self.spectral_init()?;
        self.solve_from(start, config)
    }

    /// Power iterations from `start` until the sign vector stops changing,
    /// a state repeats, or `max_iters` updates have been taken.
    pub fn solve_from(&self, start: DesignAssignment, config: &DesignConfig) -> Result<DesignSolution> {
        config.validate()?;
        check_len(&self.inverse, &start)?;
        let n = self.n_units();
        let mut y = DesignAssignment::new(start.signs)?;
        let mut trace = vec![design_objective(&self.inverse, &y, config)?];
        let mut seen: HashSet<Vec<i8>> = HashSet::new();
        seen.insert(y.signs.clone());
        let mut iterations = 0;
        let mut converged = false;
        let mut cycled = false;
        let mut next = iterate_step(&self.inverse, &y, config)?;
        loop {
            if next.signs == y.signs {
                converged = true;
                break;
            }
            if iterations == config.max_iters {
                break;
            }
            if !seen.insert(next.signs.clone()) {
                cycled = true;
                break;
            }
            y = next;
            iterations += 1;
            trace.push(design_objective(&self.inverse, &y, config)?);
            next = iterate_step(&self.inverse, &y, config)?;
        }
        debug_assert!(
            !(cycled && config.variant == Variant::NormSpcd && n <= 24),
            "normalized iteration revisited a non-fixed state"
        );
        let fixed_point_residual = next.signs.iter().zip(&y.signs).filter(|(a, b)| a != b).count() as f64;
        let simplified = simplified_weights(&self.inverse, &y)?;
        Ok(DesignSolution {
            assignment: orient(&y),
            weights: simplified.weights,
            iterations,
            converged,
            objective_trace: trace,
            fixed_point_residual,
            cycled,
            sign_mismatch: simplified.sign_mismatch,
            alpha: self.alpha,
            lambda: self.lambda,
        })
    }
}

/// Spectral initialization followed by power iterations on `C` built from `y`.
pub fn run_design(y: &Matrix, config: &DesignConfig) -> Result<DesignSolution> {
    DesignProblem::new(y, config)?.solve(config)
}
