//! Dense strictly-convex quadratic programming with warm starts.
//!
//! Solves
//!
//! ```text
//! minimize   1/2 x' H x + g' x
//! subject to A_eq x = b_eq,   lo <= A_in x <= up,   lb <= x <= ub
//! ```
//!
//! sized for the whole-body-control problems of this crate (n = 27 at 1 kHz).
//! The solver is a primal active-set method: a feasible point is found first
//! by a dual constraint-adding projection (no feasible start required), then
//! the primal iteration moves between working-set minimizers, adding the
//! smallest-index blocking constraint and dropping constraints with negative
//! multipliers. Everything is deterministic: identical inputs and warm
//! starts produce identical iterates.

use nalgebra::{DMatrix, DVector};
use std::time::Instant;

/// Diagonal floor added when the Hessian is not strongly positive definite;
/// keeps the problem strictly convex when task Jacobians leave the
/// least-squares Hessian semidefinite.
pub const HESSIAN_REGULARIZATION: f64 = 1e-10;

/// Relative part of the conditional regularization. Directions outside the
/// cost rows must stay pinned through the KKT factorization, so the added
/// diagonal scales with the Hessian magnitude; it stays many orders below
/// the task weights and leaves strongly convex problems untouched.
pub const HESSIAN_REGULARIZATION_REL: f64 = 1e-9;

/// Absolute feasibility tolerance on unit-normalized constraint rows.
pub const FEASIBILITY_TOL: f64 = 1e-9;

const DUAL_TOL: f64 = 1e-9;
const MAX_ITER: usize = 400;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    /// No feasible point; carries the residual violation of the phase-1
    /// projection (a certificate that some constraint combination cannot be
    /// satisfied).
    Infeasible,
    MaxIter,
}

/// Warm-start data: the previous primal point and active one-sided
/// constraint indices (as reported in [`QpSolution::active`]).
#[derive(Clone, Debug, Default)]
pub struct WarmStart {
    pub primal: DVector<f64>,
    pub active: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_lower: DVector<f64>,
    pub ineq_upper: DVector<f64>,
    pub lower_bounds: DVector<f64>,
    pub upper_bounds: DVector<f64>,
    pub warm: Option<WarmStart>,
}

impl QpProblem {
    pub fn new(hessian: DMatrix<f64>, gradient: DVector<f64>) -> Self {
        let n = gradient.len();
        QpProblem {
            hessian,
            gradient,
            eq_matrix: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            ineq_matrix: DMatrix::zeros(0, n),
            ineq_lower: DVector::zeros(0),
            ineq_upper: DVector::zeros(0),
            lower_bounds: DVector::from_element(n, f64::NEG_INFINITY),
            upper_bounds: DVector::from_element(n, f64::INFINITY),
            warm: None,
        }
    }

    pub fn n(&self) -> usize {
        self.gradient.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.gradient.dot(x)
    }
}

/// One-sided constraint `normal' x <= rhs` with a unit-norm normal.
#[derive(Clone, Debug)]
struct OneSided {
    normal: DVector<f64>,
    rhs: f64,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub primal: DVector<f64>,
    /// Multipliers of the equality rows.
    pub eq_duals: DVector<f64>,
    /// Multipliers of the one-sided inequality constraints (>= 0 for active
    /// rows), indexed like [`QpSolution::active`].
    pub ineq_duals: Vec<f64>,
    /// Active one-sided constraint indices at the solution.
    pub active: Vec<usize>,
    pub status: QpStatus,
    pub iterations: usize,
    pub solve_time: f64,
    pub objective: f64,
    /// Objective after each primal active-set iteration.
    pub objective_trace: Vec<f64>,
    /// Residual infeasibility of the phase-1 projection when status is
    /// `Infeasible`.
    pub infeasibility: f64,
}

/// Expand inequalities and bounds into unit-normalized one-sided rows.
fn canonicalize(p: &QpProblem) -> Vec<OneSided> {
    let n = p.n();
    let mut rows = Vec::new();
    for i in 0..p.ineq_matrix.nrows() {
        let a: DVector<f64> = p.ineq_matrix.row(i).transpose();
        let norm = a.norm();
        if norm < 1e-14 {
            continue; // vacuous row; feasibility of 0 <= b is not the solver's job
        }
        if p.ineq_upper[i].is_finite() {
            rows.push(OneSided {
                normal: &a / norm,
                rhs: p.ineq_upper[i] / norm,
            });
        }
        if p.ineq_lower[i].is_finite() {
            rows.push(OneSided {
                normal: -&a / norm,
                rhs: -p.ineq_lower[i] / norm,
            });
        }
    }
    for j in 0..n {
        if p.upper_bounds[j].is_finite() {
            let mut a = DVector::zeros(n);
            a[j] = 1.0;
            rows.push(OneSided {
                normal: a,
                rhs: p.upper_bounds[j],
            });
        }
        if p.lower_bounds[j].is_finite() {
            let mut a = DVector::zeros(n);
            a[j] = -1.0;
            rows.push(OneSided {
                normal: a,
                rhs: -p.lower_bounds[j],
            });
        }
    }
    rows
}

/// Project `x_ref` onto the feasible set by a dual constraint-adding method
/// (needs no feasible start). Returns the projection and the active set, or
/// the residual violation when the constraints are inconsistent.
fn project_feasible(
    p: &QpProblem,
    rows: &[OneSided],
    x_ref: &DVector<f64>,
    iterations: &mut usize,
) -> Result<(DVector<f64>, Vec<usize>), f64> {
    let n = p.n();
    let m_eq = p.eq_matrix.nrows();

    // Least-squares consistent point of the equalities, plus the projector
    // onto their null space.
    let mut x = x_ref.clone();
    let mut null_proj = DMatrix::<f64>::identity(n, n);
    if m_eq > 0 {
        let gram = &p.eq_matrix * p.eq_matrix.transpose();
        let chol = gram
            .clone()
            .cholesky()
            .ok_or_else(|| (&p.eq_matrix * &x - &p.eq_rhs).norm())?;
        let resid = &p.eq_matrix * &x - &p.eq_rhs;
        x -= p.eq_matrix.transpose() * chol.solve(&resid);
        let check = (&p.eq_matrix * &x - &p.eq_rhs).norm();
        if check > 1e-7 * (1.0 + p.eq_rhs.norm()) {
            return Err(check);
        }
        null_proj -= p.eq_matrix.transpose() * chol.solve(&p.eq_matrix.clone());
    }

    let mut active: Vec<usize> = Vec::new();
    let mut duals: Vec<f64> = Vec::new();

    for _ in 0..MAX_ITER {
        *iterations += 1;
        // Most violated inequality, smallest index on ties.
        let mut worst = FEASIBILITY_TOL;
        let mut pick = None;
        for (i, row) in rows.iter().enumerate() {
            let s = row.normal.dot(&x) - row.rhs;
            if s > worst + 1e-15 {
                worst = s;
                pick = Some(i);
            }
        }
        let Some(pidx) = pick else {
            return Ok((x, active));
        };
        let violation = worst;
        let a_proj = &null_proj * &rows[pidx].normal;

        // Decompose the new normal against the active ones.
        let (z, r) = decompose(rows, &active, &null_proj, &a_proj);
        let z_norm2 = z.norm_squared();

        if z_norm2 <= 1e-14 {
            // Dual-only step: the new normal lies in the active span.
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (k, (&ai, &rk)) in active.iter().zip(r.iter()).enumerate() {
                let _ = ai;
                if rk > 1e-12 {
                    let ratio = duals[k] / rk;
                    if ratio < t1 - 1e-15 {
                        t1 = ratio;
                        drop = Some(k);
                    }
                }
            }
            let Some(kd) = drop else {
                return Err(violation); // no dual ascent possible: infeasible
            };
            for (k, rk) in r.iter().enumerate() {
                duals[k] -= t1 * rk;
            }
            duals.remove(kd);
            active.remove(kd);
            continue;
        }

        // Primal step length to satisfy the violated constraint, limited by
        // dual feasibility of the active multipliers.
        let t2 = violation / z_norm2;
        let mut t1 = f64::INFINITY;
        let mut drop = None;
        for (k, rk) in r.iter().enumerate() {
            if *rk > 1e-12 {
                let ratio = duals[k] / rk;
                if ratio < t1 - 1e-15 {
                    t1 = ratio;
                    drop = Some(k);
                }
            }
        }
        let t = t1.min(t2);
        x -= t * &z;
        for (k, rk) in r.iter().enumerate() {
            duals[k] -= t * rk;
        }
        if t2 <= t1 {
            active.push(pidx);
            duals.push(t);
        } else if let Some(kd) = drop {
            duals.remove(kd);
            active.remove(kd);
        }
    }
    Err(f64::INFINITY)
}

/// Least-squares split of `a` into active-normal span and its complement:
/// `a = N r + z` with `z` orthogonal to the active normals.
fn decompose(
    rows: &[OneSided],
    active: &[usize],
    null_proj: &DMatrix<f64>,
    a: &DVector<f64>,
) -> (DVector<f64>, Vec<f64>) {
    let n = a.len();
    if active.is_empty() {
        return (a.clone(), Vec::new());
    }
    let mut nm = DMatrix::<f64>::zeros(n, active.len());
    for (k, &idx) in active.iter().enumerate() {
        nm.set_column(k, &(null_proj * &rows[idx].normal));
    }
    let gram = nm.transpose() * &nm;
    let rhs = nm.transpose() * a;
    let r = gram
        .clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .unwrap_or_else(|| gram.svd(true, true).solve(&rhs, 1e-12).unwrap());
    let z = a - &nm * &r;
    (z, r.iter().copied().collect())
}

/// Solve the problem. Deterministic; warm starts reuse the previous primal
/// point and active set.
pub fn solve(problem: &QpProblem) -> QpSolution {
    let start = Instant::now();
    let n = problem.n();
    let rows = canonicalize(problem);
    let mut iterations = 0usize;

    // Symmetrize, and regularize only when the Hessian is not strongly
    // positive definite (semidefinite task Hessians need their free
    // directions pinned).
    let mut hess = 0.5 * (&problem.hessian + problem.hessian.transpose());
    let strongly_pd = hess
        .clone()
        .cholesky()
        .map(|c| c.l_dirty().diagonal().iter().all(|d| *d >= 1e-3))
        .unwrap_or(false);
    if !strongly_pd {
        let reg = HESSIAN_REGULARIZATION.max(HESSIAN_REGULARIZATION_REL * (1.0 + hess.amax()));
        for j in 0..n {
            hess[(j, j)] += reg;
        }
    }

    // Starting point: warm primal when it is already feasible, otherwise the
    // feasibility projection of the warm primal (or of the origin).
    let x_ref = problem
        .warm
        .as_ref()
        .map(|w| w.primal.clone())
        .unwrap_or_else(|| DVector::zeros(n));
    let warm_feasible = problem.warm.is_some() && feasible(problem, &rows, &x_ref);
    let (mut x, mut working): (DVector<f64>, Vec<usize>) = if warm_feasible {
        (x_ref.clone(), problem.warm.as_ref().unwrap().active.clone())
    } else {
        match project_feasible(problem, &rows, &x_ref, &mut iterations) {
            Ok((x0, act)) => (x0, act),
            Err(violation) => {
                return QpSolution {
                    primal: x_ref,
                    eq_duals: DVector::zeros(problem.eq_matrix.nrows()),
                    ineq_duals: vec![0.0; rows.len()],
                    active: Vec::new(),
                    status: QpStatus::Infeasible,
                    iterations,
                    solve_time: start.elapsed().as_secs_f64(),
                    objective: f64::NAN,
                    objective_trace: Vec::new(),
                    infeasibility: violation,
                }
            }
        }
    };

    // Keep only linearly independent working rows.
    working = independent_subset(&rows, problem, &working);

    let mut trace = Vec::new();
    let mut eq_duals = DVector::zeros(problem.eq_matrix.nrows());
    let mut ineq_duals = vec![0.0; rows.len()];
    let mut status = QpStatus::MaxIter;

    while iterations < MAX_ITER {
        iterations += 1;
        let Some((x_star, mu_eq, mu_w)) = eqp_solve(&hess, problem, &rows, &working, n) else {
            // Degenerate working set despite the independence filter: drop
            // the newest member and retry.
            if working.pop().is_none() {
                break;
            }
            continue;
        };

        let step = &x_star - &x;
        if step.amax() <= 1e-11 * (1.0 + x.amax()) {
            // Stationary on the working set; check multiplier signs.
            let mut worst = -DUAL_TOL;
            let mut drop = None;
            for (k, &mu) in mu_w.iter().enumerate() {
                if mu < worst {
                    worst = mu;
                    drop = Some(k);
                }
            }
            match drop {
                None => {
                    x = x_star;
                    eq_duals = mu_eq;
                    for d in ineq_duals.iter_mut() {
                        *d = 0.0;
                    }
                    for (k, &idx) in working.iter().enumerate() {
                        ineq_duals[idx] = mu_w[k].max(0.0);
                    }
                    status = QpStatus::Optimal;
                    trace.push(problem.objective(&x));
                    break;
                }
                Some(k) => {
                    working.remove(k);
                    trace.push(problem.objective(&x));
                    continue;
                }
            }
        }

        // Ratio test against the constraints outside the working set.
        let mut alpha = 1.0_f64;
        let mut blocker = None;
        for (i, row) in rows.iter().enumerate() {
            if working.contains(&i) {
                continue;
            }
            let denom = row.normal.dot(&step);
            if denom > 1e-12 {
                let slack = row.rhs - row.normal.dot(&x);
                let a = (slack / denom).max(0.0);
                if a < alpha - 1e-12 {
                    alpha = a;
                    blocker = Some(i);
                }
            }
        }
        x += alpha * step;
        trace.push(problem.objective(&x));
        if let Some(b) = blocker {
            working.push(b);
        }
    }

    let objective = problem.objective(&x);
    QpSolution {
        primal: x,
        eq_duals,
        ineq_duals: ineq_duals.iter().map(|d| *d).collect(),
        active: working,
        status,
        iterations,
        solve_time: start.elapsed().as_secs_f64(),
        objective,
        objective_trace: trace,
        infeasibility: 0.0,
    }
}

fn feasible(problem: &QpProblem, rows: &[OneSided], x: &DVector<f64>) -> bool {
    if problem.eq_matrix.nrows() > 0 {
        let r = &problem.eq_matrix * x - &problem.eq_rhs;
        if r.amax() > FEASIBILITY_TOL {
            return false;
        }
    }
    rows.iter().all(|row| row.normal.dot(x) - row.rhs <= FEASIBILITY_TOL)
}

/// Greedily keep working-set rows while the stacked equality+working matrix
/// stays full row rank.
fn independent_subset(rows: &[OneSided], problem: &QpProblem, working: &[usize]) -> Vec<usize> {
    let n = problem.n();
    let m_eq = problem.eq_matrix.nrows();
    let mut kept: Vec<usize> = Vec::new();
    for &idx in working {
        if kept.contains(&idx) || m_eq + kept.len() + 1 > n {
            continue;
        }
        let mut stacked = DMatrix::<f64>::zeros(m_eq + kept.len() + 1, n);
        for i in 0..m_eq {
            stacked.row_mut(i).copy_from(&problem.eq_matrix.row(i));
        }
        for (k, &j) in kept.iter().enumerate() {
            stacked.row_mut(m_eq + k).copy_from(&rows[j].normal.transpose());
        }
        stacked
            .row_mut(m_eq + kept.len())
            .copy_from(&rows[idx].normal.transpose());
        let rank = stacked.clone().svd(false, false).rank(1e-9);
        if rank == m_eq + kept.len() + 1 {
            kept.push(idx);
        }
    }
    kept
}

/// Solve the equality-constrained subproblem on the working set via a dense
/// LU of the KKT system.
fn eqp_solve(
    hess: &DMatrix<f64>,
    problem: &QpProblem,
    rows: &[OneSided],
    working: &[usize],
    n: usize,
) -> Option<(DVector<f64>, DVector<f64>, Vec<f64>)> {
    let m_eq = problem.eq_matrix.nrows();
    let m_w = working.len();
    let dim = n + m_eq + m_w;
    let mut kkt = DMatrix::<f64>::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(hess);
    for i in 0..m_eq {
        for j in 0..n {
            kkt[(n + i, j)] = problem.eq_matrix[(i, j)];
            kkt[(j, n + i)] = problem.eq_matrix[(i, j)];
        }
    }
    for (k, &idx) in working.iter().enumerate() {
        for j in 0..n {
            kkt[(n + m_eq + k, j)] = rows[idx].normal[j];
            kkt[(j, n + m_eq + k)] = rows[idx].normal[j];
        }
    }
    let mut rhs = DVector::<f64>::zeros(dim);
    for j in 0..n {
        rhs[j] = -problem.gradient[j];
    }
    for i in 0..m_eq {
        rhs[n + i] = problem.eq_rhs[i];
    }
    for (k, &idx) in working.iter().enumerate() {
        rhs[n + m_eq + k] = rows[idx].rhs;
    }
    let sol = kkt.lu().solve(&rhs)?;
    if !sol.iter().all(|v| v.is_finite()) {
        return None;
    }
    let x = sol.rows(0, n).into_owned();
    // With the KKT right-hand side [-g; b], the solved multiplier block
    // already satisfies H x + g + A' mu = 0.
    let mu_eq = sol.rows(n, m_eq).into_owned();
    let mu_w: Vec<f64> = (0..m_w).map(|k| sol[n + m_eq + k]).collect();
    Some((x, mu_eq, mu_w))
}

/// Scaled KKT residual of a solution: the maximum of stationarity, primal
/// feasibility and complementarity, each normalized by the problem scale.
pub fn kkt_residual(problem: &QpProblem, solution: &QpSolution) -> f64 {
    let rows = canonicalize(problem);
    let x = &solution.primal;
    let scale = 1.0 + problem.gradient.amax();

    let mut stationarity = &problem.hessian * x + &problem.gradient;
    if problem.eq_matrix.nrows() > 0 {
        stationarity += problem.eq_matrix.transpose() * &solution.eq_duals;
    }
    for (i, row) in rows.iter().enumerate() {
        let lam = solution.ineq_duals.get(i).copied().unwrap_or(0.0);
        if lam != 0.0 {
            stationarity += lam * &row.normal;
        }
    }
    let mut worst = stationarity.amax() / scale;

    if problem.eq_matrix.nrows() > 0 {
        let r = &problem.eq_matrix * x - &problem.eq_rhs;
        worst = worst.max(r.amax() / (1.0 + problem.eq_rhs.amax()));
    }
    for (i, row) in rows.iter().enumerate() {
        let slack = row.rhs - row.normal.dot(x);
        worst = worst.max(-slack / (1.0 + row.rhs.abs()));
        let lam = solution.ineq_duals.get(i).copied().unwrap_or(0.0);
        worst = worst.max((lam * slack).abs() / scale);
        worst = worst.max(-lam / scale); // dual feasibility
    }
    worst
}
