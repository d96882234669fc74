//! Convex quadratic programs over products of probability simplices.
//!
//! The generic problem is `min wᵀQw + cᵀw + k` subject to each block of
//! coordinates lying in a simplex. It is solved by accelerated projected
//! gradient with restart, periodically polished by an equality-constrained
//! Newton solve on the current support. Two instances are exposed: design
//! weights for a fixed assignment, and classic synthetic-control donor weights.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{DesignAssignment, Normalization, WeightVector};
use crate::numerics::{dot, extreme_eigenpair, lu_solve, norm2, Extreme, Matrix, NumericsError, SymMatrix};

pub const QP_MAX_ITERS: usize = 100_000;
pub const KKT_TOL: f64 = 1e-8;

/// Accelerated steps between polishing attempts.
const POLISH_EVERY: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpSolveStats {
    pub iterations: usize,
    pub kkt_residual: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("{0} group is empty")]
    EmptyGroup(&'static str),
    #[error("assignment must be oriented before fitting weights")]
    Unoriented,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("QP did not converge: kkt residual {:e} after {} iterations", .stats.kkt_residual, .stats.iterations)]
    NoConvergence { weights: Box<WeightVector>, stats: QpSolveStats },
}

pub type Result<T> = std::result::Result<T, QpError>;

/// Euclidean projection onto `{z ≥ 0, Σz = 1}` by sort and threshold.
pub fn project_simplex(x: &[f64]) -> Vec<f64> {
    assert!(!x.is_empty(), "cannot project an empty vector");
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite input"));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if v - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    let mut out: Vec<f64> = x.iter().map(|&v| (v - theta).max(0.0)).collect();
    // remove the rounding drift of the cumulative sum
    let s: f64 = out.iter().sum();
    if s > 0.0 && (s - 1.0).abs() > 0.0 {
        out.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// `min wᵀQw + cᵀw + constant` with `w` restricted to a simplex per block.
#[derive(Debug, Clone)]
pub struct SimplexQp {
    pub q: SymMatrix,
    pub c: Vec<f64>,
    pub constant: f64,
    pub blocks: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct QpOutcome {
    pub w: Vec<f64>,
    pub stats: QpSolveStats,
    pub converged: bool,
    /// Objective after every accepted iterate, starting from the initial point.
    pub trace: Vec<f64>,
}

impl SimplexQp {
    pub fn objective(&self, w: &[f64]) -> f64 {
        self.q.quad_form(w) + dot(&self.c, w) + self.constant
    }

    pub fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let mut g = self.q.matvec(w);
        g.iter_mut().zip(&self.c).for_each(|(gi, ci)| *gi = 2.0 * *gi + ci);
        g
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for block in &self.blocks {
            let part: Vec<f64> = block.iter().map(|&i| x[i]).collect();
            for (&i, v) in block.iter().zip(project_simplex(&part)) {
                out[i] = v;
            }
        }
        out
    }

    /// `‖w − Π(w − ∇f(w))‖₂`
    pub fn kkt_residual(&self, w: &[f64]) -> f64 {
        let g = self.gradient(w);
        let step: Vec<f64> = w.iter().zip(&g).map(|(a, b)| a - b).collect();
        let p = self.project(&step);
        norm2(&w.iter().zip(&p).map(|(a, b)| a - b).collect::<Vec<_>>())
    }

    /// Acceptance bound for `converged`.
    fn tolerance(&self, objective: f64) -> f64 {
        KKT_TOL * (1.0 + objective.abs())
    }

    /// Iteration stops once the residual is below `KKT_TOL` outright, which
    /// is tighter than `tolerance` whenever the objective is nonzero.
    fn done(&self, kkt: f64) -> bool {
        kkt <= KKT_TOL
    }

    fn uniform_start(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.c.len()];
        for block in &self.blocks {
            for &i in block {
                w[i] = 1.0 / block.len() as f64;
            }
        }
        w
    }

    fn validate(&self) -> Result<()> {
        let n = self.q.order();
        if self.c.len() != n {
            return Err(QpError::InvalidInput(format!("linear term has length {} for order {n}", self.c.len())));
        }
        let mut seen = vec![false; n];
        for block in &self.blocks {
            if block.is_empty() {
                return Err(QpError::InvalidInput("empty simplex block".into()));
            }
            for &i in block {
                if i >= n || seen[i] {
                    return Err(QpError::InvalidInput(format!("block index {i} is out of range or repeated")));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(QpError::InvalidInput("blocks do not cover every coordinate".into()));
        }
        Ok(())
    }

    /// Runs the solver from uniform weights.
    pub fn solve(&self) -> Result<QpOutcome> {
        self.validate()?;
        let n = self.q.order();
        let start = self.uniform_start();
        if self.blocks.iter().all(|b| b.len() == 1) {
            let objective = self.objective(&start);
            let stats = QpSolveStats { iterations: 0, kkt_residual: self.kkt_residual(&start), objective };
            return Ok(QpOutcome { w: start, stats, converged: true, trace: vec![objective] });
        }
        let top = if n > 0 && self.q.max_abs() > 0.0 {
            extreme_eigenpair(&self.q, Extreme::Largest)?.value.max(0.0)
        } else {
            0.0
        };
        let lipschitz = (2.0 * top).max(f64::MIN_POSITIVE.sqrt());

        let mut x = start;
        let mut fx = self.objective(&x);
        let mut trace = vec![fx];
        let mut x_prev = x.clone();
        let mut t = 1.0_f64;
        let mut iterations = 0;
        let mut kkt = self.kkt_residual(&x);
        if self.done(kkt) {
            let stats = QpSolveStats { iterations, kkt_residual: kkt, objective: fx };
            return Ok(QpOutcome { w: x, stats, converged: true, trace });
        }
        while iterations < QP_MAX_ITERS {
            iterations += 1;
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let momentum = (t - 1.0) / t_next;
            let yk: Vec<f64> = x.iter().zip(&x_prev).map(|(a, b)| a + momentum * (a - b)).collect();
            let mut z = self.gradient_step(&yk, lipschitz);
            let mut fz = self.objective(&z);
            if fz > fx {
                // restart from a plain projected-gradient step, which cannot increase f
                z = self.gradient_step(&x, lipschitz);
                fz = self.objective(&z);
                t = 1.0;
            } else {
                t = t_next;
            }
            if fz <= fx {
                x_prev = std::mem::replace(&mut x, z);
                fx = fz;
            } else {
                x_prev = x.clone();
            }
            trace.push(fx);

            if iterations % POLISH_EVERY == 0 || iterations == QP_MAX_ITERS {
                kkt = self.kkt_residual(&x);
                if self.done(kkt) {
                    break;
                }
                if let Some(p) = self.polish(&x) {
                    let fp = self.objective(&p);
                    let kp = self.kkt_residual(&p);
                    if fp <= fx + 1e-14 * fx.abs().max(1.0) && kp < kkt {
                        x_prev = p.clone();
                        x = p;
                        fx = fp.min(fx);
                        kkt = kp;
                        t = 1.0;
                        trace.push(fx);
                        if self.done(kkt) {
                            break;
                        }
                    }
                }
            }
        }
        kkt = self.kkt_residual(&x);
        let stats = QpSolveStats { iterations, kkt_residual: kkt, objective: fx };
        let converged = kkt <= self.tolerance(fx);
        Ok(QpOutcome { w: x, stats, converged, trace })
    }

    fn gradient_step(&self, x: &[f64], lipschitz: f64) -> Vec<f64> {
        let g = self.gradient(x);
        let step: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - b / lipschitz).collect();
        self.project(&step)
    }

    /// Minimizes on the support of `w` with the block equalities enforced,
    /// stepping back along the segment and shrinking the support whenever the
    /// solution leaves the non-negative orthant.
    fn polish(&self, w: &[f64]) -> Option<Vec<f64>> {
        let n = w.len();
        let mut support: Vec<bool> = w.iter().map(|&v| v > 0.0).collect();
        let mut x = w.to_vec();
        for _ in 0..=n {
            let z = self.support_minimizer(&support, &x)?;
            let worst = (0..n)
                .filter(|&i| support[i] && z[i] < 0.0)
                .map(|i| (i, x[i] / (x[i] - z[i])))
                .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite ratio"));
            match worst {
                None => return Some(z),
                Some((drop, step)) => {
                    for i in 0..n {
                        x[i] += step * (z[i] - x[i]);
                        if !support[i] || x[i] < 0.0 {
                            x[i] = 0.0;
                        }
                    }
                    x[drop] = 0.0;
                    support[drop] = false;
                    self.renormalize(&mut x);
                }
            }
        }
        None
    }

    fn renormalize(&self, x: &mut [f64]) {
        for block in &self.blocks {
            let s: f64 = block.iter().map(|&i| x[i]).sum();
            if s > 0.0 {
                block.iter().for_each(|&i| x[i] /= s);
            }
        }
    }

    /// Equality-constrained minimizer on `support` via the KKT system. A
    /// small proximal term keeps the system regular when `Q` is singular on the
    /// support; a few refinement passes drive its bias to zero.
    fn support_minimizer(&self, support: &[bool], anchor: &[f64]) -> Option<Vec<f64>> {
        let idx: Vec<usize> = (0..support.len()).filter(|&i| support[i]).collect();
        let blocks: Vec<Vec<usize>> = self
            .blocks
            .iter()
            .map(|b| b.iter().filter_map(|i| idx.iter().position(|j| j == i)).collect())
            .collect();
        if blocks.iter().any(|b: &Vec<usize>| b.is_empty()) {
            return None;
        }
        let m = idx.len();
        let nb = blocks.len();
        let scale = idx.iter().map(|&i| self.q.get(i, i).abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let build = |delta: f64| {
            let mut k = Matrix::zeros(m + nb, m + nb);
            for (a, &i) in idx.iter().enumerate() {
                for (b, &j) in idx.iter().enumerate() {
                    k[(a, b)] = 2.0 * self.q.get(i, j);
                }
                k[(a, a)] += delta;
            }
            for (bi, block) in blocks.iter().enumerate() {
                for &a in block {
                    k[(a, m + bi)] = 1.0;
                    k[(m + bi, a)] = 1.0;
                }
            }
            k
        };
        let solve = |k: &Matrix, delta: f64, center: &[f64]| {
            let mut rhs = vec![0.0; m + nb];
            for (a, &i) in idx.iter().enumerate() {
                rhs[a] = -self.c[i] + delta * center[a];
            }
            rhs[m..].iter_mut().for_each(|r| *r = 1.0);
            lu_solve(k, &rhs).ok().map(|s| s[..m].to_vec())
        };
        let exact = build(0.0);
        let mut center: Vec<f64> = idx.iter().map(|&i| anchor[i]).collect();
        let sol = match solve(&exact, 0.0, &center) {
            Some(s) => s,
            None => {
                let delta = 1e-9 * scale;
                let k = build(delta);
                for _ in 0..6 {
                    center = solve(&k, delta, &center)?;
                }
                center
            }
        };
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let mut out = vec![0.0; support.len()];
        for (a, &i) in idx.iter().enumerate() {
            out[i] = sol[a];
        }
        Some(out)
    }
}

fn outcome_to_result(outcome: QpOutcome, values: Vec<f64>) -> Result<(WeightVector, QpSolveStats)> {
    let weights = WeightVector { values, normalization: Normalization::GroupSumsOne };
    if outcome.converged {
        Ok((weights, outcome.stats))
    } else {
        Err(QpError::NoConvergence { weights: Box::new(weights), stats: outcome.stats })
    }
}

/// The weight problem for a fixed assignment:
/// `(1/T) Σₜ (Σ_treated wᵢYᵢₜ − Σ_control wᵢYᵢₜ)² + σ‖w‖²`.
pub fn design_weight_qp(y: &Matrix, assignment: &DesignAssignment, sigma: f64) -> Result<SimplexQp> {
    let mask = assignment.treated_mask().ok_or(QpError::Unoriented)?;
    if y.nrows() != assignment.len() {
        return Err(QpError::InvalidInput(format!("{} rows for {} units", y.nrows(), assignment.len())));
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(QpError::InvalidInput(format!("sigma must be non-negative, got {sigma}")));
    }
    let treated: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let control: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
    if treated.is_empty() {
        return Err(QpError::EmptyGroup("treated"));
    }
    if control.is_empty() {
        return Err(QpError::EmptyGroup("control"));
    }
    let t = y.ncols().max(1) as f64;
    let g = y.row_gram();
    let s: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { -1.0 }).collect();
    let q = SymMatrix::from_fn(y.nrows(), |i, j| s[i] * s[j] * g.get(i, j) / t + if i == j { sigma } else { 0.0 });
    Ok(SimplexQp { q, c: vec![0.0; y.nrows()], constant: 0.0, blocks: vec![treated, control] })
}

/// Objective of [`design_weight_qp`] at group-sums-one weights.
pub fn design_weight_objective(y: &Matrix, assignment: &DesignAssignment, weights: &[f64], sigma: f64) -> Result<f64> {
    Ok(design_weight_qp(y, assignment, sigma)?.objective(weights))
}

/// Exact design weights for a fixed oriented assignment.
pub fn solve_design_weights(
    y: &Matrix,
    assignment: &DesignAssignment,
    sigma: f64,
) -> Result<(WeightVector, QpSolveStats)> {
    let qp = design_weight_qp(y, assignment, sigma)?;
    let outcome = qp.solve()?;
    let values = outcome.w.clone();
    outcome_to_result(outcome, values)
}

/// Donor weights on the simplex minimizing the pre-period tracking error of
/// `treated_unit`. The result has length N: the treated unit carries weight
/// one and the donors sum to one.
pub fn fit_sc_weights(y_pre: &Matrix, treated_unit: usize) -> Result<(WeightVector, QpSolveStats)> {
    let n = y_pre.nrows();
    if n < 2 {
        return Err(QpError::InvalidInput(format!("need at least 2 units, got {n}")));
    }
    if treated_unit >= n {
        return Err(QpError::InvalidInput(format!("treated unit {treated_unit} out of range for {n} units")));
    }
    let donors: Vec<usize> = (0..n).filter(|&i| i != treated_unit).collect();
    let x = y_pre.select_rows(&donors);
    let target = y_pre.row(treated_unit);
    let q = x.row_gram();
    let c: Vec<f64> = x.matvec(target).iter().map(|v| -2.0 * v).collect();
    let qp = SimplexQp { q, c, constant: dot(target, target), blocks: vec![(0..donors.len()).collect()] };
    let outcome = qp.solve()?;
    let mut values = vec![0.0; n];
    values[treated_unit] = 1.0;
    for (k, &i) in donors.iter().enumerate() {
        values[i] = outcome.w[k];
    }
    outcome_to_result(outcome, values)
}
