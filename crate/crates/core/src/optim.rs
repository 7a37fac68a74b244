//! Dense linear and quadratic programming for the small problems that show up
//! in support-function queries, redundancy removal and the MPC solve.
//!
//! Every problem is given in the canonical form
//!
//! ```text
//! minimize  cᵀx   subject to  A x ≤ b,  lower ≤ x ≤ upper
//! ```
//!
//! with `x` free unless bounded. Problems here are tall and thin (many
//! halfspaces, few variables), so [`solve_lp`] runs a two-phase tableau
//! simplex on the Lagrangian dual in standard form,
//!
//! ```text
//! minimize  bᵀλ   subject to  Aᵀλ = -c,  λ ≥ 0,
//! ```
//!
//! whose tableau has one row per primal variable. The primal optimum is read
//! back from the simplex multipliers of the final basis.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Absolute tolerance on constraint residuals.
pub const FEASIBILITY_TOL: f64 = 1e-9;
/// Relative tolerance on objective values.
pub const OBJECTIVE_REL_TOL: f64 = 1e-8;
/// Largest scaled residual accepted from a stalled interior-point run.
const IPM_ACCEPT_TOL: f64 = 1e-8;
const STALL_ITERATIONS: usize = 8;

const PIVOT_TOL: f64 = 1e-10;
const REDUCED_COST_TOL: f64 = 1e-10;
/// Consecutive degenerate pivots before switching to Bland's rule.
const DEGENERATE_STREAK: usize = 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("malformed problem: {0}")]
    MalformedProblem(String),
    #[error("no optimality or infeasibility certificate after {iterations} iterations")]
    NumericalFailure { iterations: usize },
    #[error("quadratic cost is not positive semidefinite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone)]
pub struct LinearProgram {
    pub objective: DVector<f64>,
    pub constraint_matrix: DMatrix<f64>,
    pub constraint_rhs: DVector<f64>,
    /// Per-variable lower bounds, `-inf` for none.
    pub lower: Vec<f64>,
    /// Per-variable upper bounds, `+inf` for none.
    pub upper: Vec<f64>,
}

impl LinearProgram {
    /// An LP over free variables.
    pub fn new(objective: DVector<f64>, constraint_matrix: DMatrix<f64>, constraint_rhs: DVector<f64>) -> Self {
        let n = objective.len();
        Self {
            objective,
            constraint_matrix,
            constraint_rhs,
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn with_bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn n_constraints(&self) -> usize {
        self.constraint_rhs.len()
    }

    fn validate(&self) -> Result<(), OptimError> {
        let (rows, cols) = self.constraint_matrix.shape();
        if rows != self.constraint_rhs.len() {
            return Err(OptimError::MalformedProblem(format!(
                "constraint matrix has {rows} rows but rhs has length {}",
                self.constraint_rhs.len()
            )));
        }
        if cols != self.objective.len() && rows > 0 {
            return Err(OptimError::MalformedProblem(format!(
                "constraint matrix has {cols} columns but objective has length {}",
                self.objective.len()
            )));
        }
        if self.lower.len() != self.objective.len() || self.upper.len() != self.objective.len() {
            return Err(OptimError::MalformedProblem(
                "bound vectors must match the number of variables".into(),
            ));
        }
        let finite = self.objective.iter().all(|v| v.is_finite())
            && self.constraint_matrix.iter().all(|v| v.is_finite())
            && self.constraint_rhs.iter().all(|v| !v.is_nan());
        if !finite {
            return Err(OptimError::MalformedProblem("non-finite coefficient".into()));
        }
        if self.lower.iter().any(|v| v.is_nan() || *v == f64::INFINITY)
            || self.upper.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY)
        {
            return Err(OptimError::MalformedProblem("invalid variable bound".into()));
        }
        Ok(())
    }

    /// Stacks bounds below the general rows so the problem reads `A x ≤ b`.
    fn expanded(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.n_vars();
        let m = self.n_constraints();
        let bound_rows =
            self.lower.iter().filter(|v| v.is_finite()).count() + self.upper.iter().filter(|v| v.is_finite()).count();
        let mut a = DMatrix::zeros(m + bound_rows, n);
        let mut b = DVector::zeros(m + bound_rows);
        if m > 0 {
            a.rows_mut(0, m).copy_from(&self.constraint_matrix);
            b.rows_mut(0, m).copy_from(&self.constraint_rhs);
        }
        let mut r = m;
        for j in 0..n {
            if self.lower[j].is_finite() {
                a[(r, j)] = -1.0;
                b[r] = -self.lower[j];
                r += 1;
            }
            if self.upper[j].is_finite() {
                a[(r, j)] = 1.0;
                b[r] = self.upper[j];
                r += 1;
            }
        }
        (a, b)
    }
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub status: LpStatus,
    pub primal: DVector<f64>,
    pub objective_value: f64,
    /// Multipliers `y ≤ 0` of the general rows, with `Aᵀy = c` and `bᵀy`
    /// equal to the optimal value (bound rows excluded).
    pub dual: Option<DVector<f64>>,
}

impl LpSolution {
    fn infeasible(n: usize) -> Self {
        Self {
            status: LpStatus::Infeasible,
            primal: DVector::zeros(n),
            objective_value: f64::INFINITY,
            dual: None,
        }
    }

    fn unbounded(n: usize) -> Self {
        Self {
            status: LpStatus::Unbounded,
            primal: DVector::zeros(n),
            objective_value: f64::NEG_INFINITY,
            dual: None,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }
}

/// Standard-form tableau `P y = q, y ≥ 0` with one artificial per row.
struct Tableau {
    rows: usize,
    /// Structural columns; artificials occupy `cols..cols + rows`.
    cols: usize,
    width: usize,
    data: Vec<f64>,
    /// Reduced costs followed by minus the objective value.
    cost: Vec<f64>,
    basis: Vec<usize>,
    iterations: usize,
    max_iterations: usize,
}

enum PhaseEnd {
    Optimal,
    Unbounded,
}

impl Tableau {
    /// Builds the tableau for `Aᵀy = rhs`, flipping rows so that the
    /// right-hand side is nonnegative. Returns the tableau and row signs.
    fn for_dual(a: &DMatrix<f64>, rhs: &DVector<f64>) -> (Self, Vec<f64>) {
        let (m, n) = a.shape();
        let rows = n;
        let cols = m;
        let width = cols + rows + 1;
        let mut data = vec![0.0; rows * width];
        let mut signs = vec![1.0; rows];
        for i in 0..rows {
            let s = if rhs[i] < 0.0 { -1.0 } else { 1.0 };
            signs[i] = s;
            let row = &mut data[i * width..(i + 1) * width];
            for j in 0..cols {
                row[j] = s * a[(j, i)];
            }
            row[cols + i] = 1.0;
            row[width - 1] = s * rhs[i];
        }
        let max_iterations = 50 * (rows + cols) + 1000;
        (
            Self {
                rows,
                cols,
                width,
                data,
                cost: vec![0.0; width],
                basis: (cols..cols + rows).collect(),
                iterations: 0,
                max_iterations,
            },
            signs,
        )
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + j]
    }

    #[inline]
    fn rhs(&self, i: usize) -> f64 {
        self.data[i * self.width + self.width - 1]
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let w = self.width;
        let p = self.data[r * w + c];
        for v in &mut self.data[r * w..(r + 1) * w] {
            *v /= p;
        }
        let (before, rest) = self.data.split_at_mut(r * w);
        let (prow, after) = rest.split_at_mut(w);
        for row in before.chunks_exact_mut(w).chain(after.chunks_exact_mut(w)) {
            let f = row[c];
            if f != 0.0 {
                for (x, y) in row.iter_mut().zip(prow.iter()) {
                    *x -= f * y;
                }
                row[c] = 0.0;
            }
        }
        let f = self.cost[c];
        if f != 0.0 {
            for (x, y) in self.cost.iter_mut().zip(prow.iter()) {
                *x -= f * y;
            }
            self.cost[c] = 0.0;
        }
        self.basis[r] = c;
    }

    /// Sets the cost row from per-column costs (length `cols + rows`).
    fn price(&mut self, costs: &[f64]) {
        self.cost[..costs.len()].copy_from_slice(costs);
        self.cost[self.width - 1] = 0.0;
        for i in 0..self.rows {
            let cb = costs[self.basis[i]];
            if cb != 0.0 {
                let w = self.width;
                for j in 0..w {
                    self.cost[j] -= cb * self.data[i * w + j];
                }
            }
        }
    }

    fn run(&mut self, allow_artificial: bool) -> Result<PhaseEnd, OptimError> {
        let limit = if allow_artificial {
            self.cols + self.rows
        } else {
            self.cols
        };
        let mut degenerate = 0usize;
        loop {
            if self.iterations >= self.max_iterations {
                return Err(OptimError::NumericalFailure {
                    iterations: self.iterations,
                });
            }
            let bland = degenerate >= DEGENERATE_STREAK;
            let mut enter = None;
            let mut best = -REDUCED_COST_TOL;
            for j in 0..limit {
                let d = self.cost[j];
                if d < best {
                    enter = Some(j);
                    if bland {
                        break;
                    }
                    best = d;
                }
            }
            let Some(c) = enter else {
                return Ok(PhaseEnd::Optimal);
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.rows {
                let a = self.at(i, c);
                if a > PIVOT_TOL {
                    let ratio = self.rhs(i).max(0.0) / a;
                    match leave {
                        None => leave = Some((i, ratio)),
                        Some((r, best_ratio)) => {
                            let tie = (ratio - best_ratio).abs() <= 1e-12 * (1.0 + best_ratio);
                            if (ratio < best_ratio && !tie) || (tie && self.basis[i] < self.basis[r]) {
                                leave = Some((i, ratio));
                            }
                        }
                    }
                }
            }
            let Some((r, ratio)) = leave else {
                return Ok(PhaseEnd::Unbounded);
            };
            if ratio <= 1e-12 {
                degenerate += 1;
            } else {
                degenerate = 0;
            }
            self.pivot(r, c);
            self.iterations += 1;
        }
    }

    /// Pivots artificials still in the basis onto structural columns where
    /// possible. Rows with no structural entry are redundant and left alone.
    fn drive_out_artificials(&mut self) {
        for i in 0..self.rows {
            if self.basis[i] < self.cols {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for j in 0..self.cols {
                let a = self.at(i, j).abs();
                if a > 1e-9 && best.is_none_or(|(_, b)| a > b) {
                    best = Some((j, a));
                }
            }
            if let Some((j, _)) = best {
                let w = self.width;
                self.data[i * w + w - 1] = 0.0;
                self.pivot(i, j);
            }
        }
        for i in 0..self.rows {
            let w = self.width;
            let v = &mut self.data[i * w + w - 1];
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    fn basic_values(&self) -> Vec<f64> {
        let mut y = vec![0.0; self.cols];
        for i in 0..self.rows {
            if self.basis[i] < self.cols {
                y[self.basis[i]] = self.rhs(i).max(0.0);
            }
        }
        y
    }
}

enum DualOutcome {
    /// Optimal standard-form basis: `(y, multipliers)`.
    Optimal(Vec<f64>, Vec<f64>),
    /// `Aᵀy = rhs, y ≥ 0` has no solution.
    Infeasible,
    /// The standard-form objective is unbounded below.
    Unbounded,
}

/// Solves `min bᵀy s.t. Aᵀy = rhs, y ≥ 0`.
fn solve_standard(a: &DMatrix<f64>, b: &DVector<f64>, rhs: &DVector<f64>) -> Result<DualOutcome, OptimError> {
    let (mut t, signs) = Tableau::for_dual(a, rhs);
    let total = t.cols + t.rows;

    // Phase 1: minimize the sum of artificials.
    let mut phase1 = vec![0.0; total];
    for c in phase1.iter_mut().skip(t.cols) {
        *c = 1.0;
    }
    t.price(&phase1);
    t.run(true)?;
    let infeasibility = -t.cost[t.width - 1];
    let scale = 1.0 + rhs.iter().map(|v| v.abs()).sum::<f64>();
    if infeasibility > 1e-9 * scale {
        return Ok(DualOutcome::Infeasible);
    }
    t.drive_out_artificials();

    // Phase 2 over structural columns only.
    let mut phase2 = vec![0.0; total];
    phase2[..t.cols].copy_from_slice(b.as_slice());
    t.price(&phase2);
    match t.run(false)? {
        PhaseEnd::Unbounded => Ok(DualOutcome::Unbounded),
        PhaseEnd::Optimal => {
            let y = t.basic_values();
            let multipliers = (0..t.rows).map(|i| -signs[i] * t.cost[t.cols + i]).collect();
            Ok(DualOutcome::Optimal(y, multipliers))
        }
    }
}

/// Solves `lp` to optimality or reports infeasibility / unboundedness.
pub fn solve_lp(lp: &LinearProgram) -> Result<LpSolution, OptimError> {
    lp.validate()?;
    let n = lp.n_vars();
    let (a, b) = lp.expanded();
    let m = a.nrows();
    if b.iter().any(|v| *v == f64::NEG_INFINITY) {
        return Ok(LpSolution::infeasible(n));
    }
    // Rows with infinite rhs impose nothing.
    let keep_map: Vec<usize> = (0..m).filter(|&i| b[i].is_finite()).collect();
    let (a, b) = if keep_map.len() < m {
        (
            a.select_rows(keep_map.iter()),
            DVector::from_iterator(keep_map.len(), keep_map.iter().map(|&i| b[i])),
        )
    } else {
        (a, b)
    };

    if n == 0 {
        let feasible = b.iter().all(|v| *v >= -FEASIBILITY_TOL);
        return Ok(if feasible {
            LpSolution {
                status: LpStatus::Optimal,
                primal: DVector::zeros(0),
                objective_value: 0.0,
                dual: Some(DVector::zeros(lp.n_constraints())),
            }
        } else {
            LpSolution::infeasible(0)
        });
    }

    let neg_c = -&lp.objective;
    match solve_standard(&a, &b, &neg_c)? {
        DualOutcome::Optimal(y, x) => {
            let primal = DVector::from_vec(x);
            let objective_value = lp.objective.dot(&primal);
            let mut dual = DVector::zeros(lp.n_constraints());
            for (k, &orig) in keep_map.iter().enumerate() {
                if orig < lp.n_constraints() {
                    dual[orig] = -y[k];
                }
            }
            Ok(LpSolution {
                status: LpStatus::Optimal,
                primal,
                objective_value,
                dual: Some(dual),
            })
        }
        DualOutcome::Unbounded => Ok(LpSolution::infeasible(n)),
        DualOutcome::Infeasible => {
            // Either the primal is infeasible or unbounded. Farkas: the primal
            // is infeasible iff min bᵀy over Aᵀy = 0, y ≥ 0 is unbounded.
            match solve_standard(&a, &b, &DVector::zeros(n))? {
                DualOutcome::Unbounded => Ok(LpSolution::infeasible(n)),
                _ => Ok(LpSolution::unbounded(n)),
            }
        }
    }
}

/// Finds any point of `{x : A x ≤ b}` or `None` when it is empty.
pub fn feasible_point(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<Option<DVector<f64>>, OptimError> {
    let lp = LinearProgram::new(DVector::zeros(a.ncols()), a.clone(), b.clone());
    let sol = solve_lp(&lp)?;
    Ok(match sol.status {
        LpStatus::Optimal => Some(sol.primal),
        _ => None,
    })
}

/// `minimize xᵀ Q x + qᵀ x + constant` subject to the rows and bounds of `constraints`
/// (whose objective is ignored).
#[derive(Debug, Clone)]
pub struct QuadraticProgram {
    pub quadratic: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
    pub constraint_matrix: DMatrix<f64>,
    pub constraint_rhs: DVector<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl QuadraticProgram {
    pub fn new(
        quadratic: DMatrix<f64>,
        linear: DVector<f64>,
        constraint_matrix: DMatrix<f64>,
        constraint_rhs: DVector<f64>,
    ) -> Self {
        let n = linear.len();
        Self {
            quadratic,
            linear,
            constant: 0.0,
            constraint_matrix,
            constraint_rhs,
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn with_constant(mut self, constant: f64) -> Self {
        self.constant = constant;
        self
    }

    pub fn with_bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    fn as_lp(&self, objective: DVector<f64>) -> LinearProgram {
        LinearProgram {
            objective,
            constraint_matrix: self.constraint_matrix.clone(),
            constraint_rhs: self.constraint_rhs.clone(),
            lower: self.lower.clone(),
            upper: self.upper.clone(),
        }
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        (x.transpose() * &self.quadratic * x)[(0, 0)] + self.linear.dot(x) + self.constant
    }
}

/// Largest absolute KKT residual (stationarity, primal feasibility,
/// complementarity) of a QP solution with multipliers `y ≤ 0` on the rows
/// `A x ≤ b` (bounds expanded into rows).
pub fn qp_kkt_residual(qp: &QuadraticProgram, sol: &LpSolution) -> f64 {
    let lp = qp.as_lp(qp.linear.clone());
    let (a, b) = lp.expanded();
    let Some(y) = &sol.dual else { return f64::INFINITY };
    if y.len() != a.nrows() {
        return f64::INFINITY;
    }
    let x = &sol.primal;
    let stationarity = (&qp.quadratic * x * 2.0 + &qp.linear - a.transpose() * y).amax();
    let slack = &b - &a * x;
    let primal = slack.iter().map(|s| (-s).max(0.0)).fold(0.0, f64::max);
    let comp = slack
        .iter()
        .zip(y.iter())
        .map(|(s, l)| (s * l).abs())
        .fold(0.0, f64::max);
    let sign = y.iter().map(|l| l.max(0.0)).fold(0.0, f64::max);
    stationarity.max(primal).max(comp).max(sign)
}

/// Solves a convex QP with a primal-dual interior-point method.
///
/// The returned `dual` covers all rows including expanded bounds, in the same
/// `y ≤ 0` convention as [`solve_lp`].
pub fn solve_qp(qp: &QuadraticProgram) -> Result<LpSolution, OptimError> {
    let n = qp.linear.len();
    if qp.quadratic.shape() != (n, n) {
        return Err(OptimError::MalformedProblem(format!(
            "quadratic cost is {:?}, expected {n}x{n}",
            qp.quadratic.shape()
        )));
    }
    let lp = qp.as_lp(DVector::zeros(n));
    lp.validate()?;
    let asym = (&qp.quadratic - qp.quadratic.transpose()).amax();
    let qscale = 1.0 + qp.quadratic.amax();
    if asym > 1e-9 * qscale {
        return Err(OptimError::MalformedProblem("quadratic cost is not symmetric".into()));
    }
    let p = (&qp.quadratic + qp.quadratic.transpose()) * 0.5;
    if n > 0 {
        let min_eig = p.clone().symmetric_eigenvalues().min();
        if min_eig < -1e-9 * qscale {
            return Err(OptimError::NotPsd {
                min_eigenvalue: min_eig,
            });
        }
    }

    let (a, b) = lp.expanded();
    let m = a.nrows();

    // Feasibility and recession-direction checks through the LP solver.
    if m > 0 && solve_lp(&lp)?.status == LpStatus::Infeasible {
        return Ok(LpSolution::infeasible(n));
    }
    let p_scaled = &p * 2.0;
    {
        // Unbounded iff some d with Pd = 0, Ad ≤ 0 has qᵀd < 0.
        let rows = m + 2 * n;
        let mut ra = DMatrix::zeros(rows, n);
        if m > 0 {
            ra.rows_mut(0, m).copy_from(&a);
        }
        ra.rows_mut(m, n).copy_from(&p_scaled);
        ra.rows_mut(m + n, n).copy_from(&(-&p_scaled));
        let mut rb = DVector::zeros(rows);
        for i in m..rows {
            rb[i] = 1e-9 * qscale;
        }
        let rec = LinearProgram::new(qp.linear.clone(), ra, rb).with_bounds(vec![-1.0; n], vec![1.0; n]);
        let sol = solve_lp(&rec)?;
        if sol.is_optimal() && sol.objective_value < -1e-7 * (1.0 + qp.linear.amax()) {
            return Ok(LpSolution::unbounded(n));
        }
    }

    if m == 0 {
        let x = solve_symmetric(&p_scaled, &(-&qp.linear)).ok_or(OptimError::NumericalFailure { iterations: 0 })?;
        let objective_value = qp.value(&x);
        return Ok(LpSolution {
            status: LpStatus::Optimal,
            primal: x,
            objective_value,
            dual: Some(DVector::zeros(0)),
        });
    }

    let x = interior_point(&p_scaled, &qp.linear, &a, &b)?;
    let (x, lambda) = x;
    let objective_value = qp.value(&x);
    Ok(LpSolution {
        status: LpStatus::Optimal,
        primal: x,
        objective_value,
        dual: Some(-lambda),
    })
}

fn solve_symmetric(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = m.clone().cholesky() {
        return Some(ch.solve(rhs));
    }
    let n = m.nrows();
    let reg = m + DMatrix::identity(n, n) * (1e-12 * (1.0 + m.amax()));
    if let Some(ch) = reg.clone().cholesky() {
        return Some(ch.solve(rhs));
    }
    reg.lu().solve(rhs)
}

/// Mehrotra predictor-corrector for `min ½xᵀPx + qᵀx s.t. Ax ≤ b`.
/// Returns `(x, λ)` with `λ ≥ 0`.
///
/// Rows are scaled to unit norm and the cost by its largest coefficient
/// before iterating; the returned multipliers are in the original scaling.
fn interior_point(
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), OptimError> {
    let m = b.len();
    // Rows without variables were already checked by the feasibility LP.
    let active: Vec<usize> = (0..m).filter(|&i| a.row(i).amax() > 1e-14).collect();
    let row_norms: Vec<f64> = active.iter().map(|&i| a.row(i).norm()).collect();
    let mut a_s = DMatrix::zeros(active.len(), a.ncols());
    let mut b_s = DVector::zeros(active.len());
    for (k, &i) in active.iter().enumerate() {
        a_s.set_row(k, &(a.row(i) / row_norms[k]));
        b_s[k] = b[i] / row_norms[k];
    }
    let cost_scale = 1.0f64.max(q.amax()).max(p.amax());
    let p_s = p / cost_scale;
    let q_s = q / cost_scale;
    let (x, lam_s) = if active.is_empty() {
        let x = solve_symmetric(&p_s, &(-&q_s)).ok_or(OptimError::NumericalFailure { iterations: 0 })?;
        (x, DVector::zeros(0))
    } else {
        interior_point_scaled(&p_s, &q_s, &a_s, &b_s)?
    };
    let mut lam = DVector::zeros(m);
    for (k, &i) in active.iter().enumerate() {
        lam[i] = lam_s[k] * cost_scale / row_norms[k];
    }
    Ok((x, lam))
}

fn interior_point_scaled(
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), OptimError> {
    let n = q.len();
    let m = b.len();
    let max_iter = 200;
    let at = a.transpose();
    // Starting point from the regularized least-squares problem, shifted inside.
    let x0 = {
        let mut kkt = p + &at * a;
        for i in 0..n {
            kkt[(i, i)] += 1e-8;
        }
        solve_symmetric(&kkt, &(&at * b - q)).unwrap_or_else(|| DVector::zeros(n))
    };
    let mut x = x0;
    let mut s = b - a * &x;
    let mut lam = DVector::from_element(m, 1.0);
    let shift = (-1.5 * s.min()).max(0.0) + 1.0;
    s.add_scalar_mut(shift);
    let scale = 1.0 + q.amax().max(b.amax()).max(p.amax());
    let mut best = (f64::INFINITY, x.clone(), lam.clone(), 0usize);

    for it in 0..max_iter {
        let rd = p * &x + q + &at * &lam;
        let rp = a * &x + &s - b;
        let mu = s.dot(&lam) / m as f64;
        let merit = (rd.amax() / scale).max(rp.amax() / scale).max(mu);
        if rd.amax() < 1e-10 * scale && rp.amax() < 1e-10 * scale && mu < 1e-12 * scale {
            return Ok((x, lam));
        }
        if merit < best.0 * 0.999 {
            best = (merit, x.clone(), lam.clone(), it);
        } else if it - best.3 >= STALL_ITERATIONS {
            break;
        }
        let w = lam.component_div(&s);
        let mut kkt = p.clone();
        kkt += &at * DMatrix::from_diagonal(&w) * a;
        let reg = 1e-13 * (1.0 + kkt.amax());
        for i in 0..n {
            kkt[(i, i)] += reg;
        }
        let chol = kkt.clone().cholesky();
        let solve = |rhs: &DVector<f64>| -> Option<DVector<f64>> {
            match &chol {
                Some(c) => Some(c.solve(rhs)),
                None => kkt.clone().lu().solve(rhs),
            }
        };
        let direction = |rc: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
            let sinv_rc = rc.component_div(&s);
            let rhs = -&rd - &at * w.component_mul(&rp) + &at * &sinv_rc;
            let dx = solve(&rhs)?;
            let dlam = w.component_mul(&(a * &dx + &rp)) - &sinv_rc;
            let ds = -&rp - a * &dx;
            Some((dx, ds, dlam))
        };
        let step = |ds: &DVector<f64>, dl: &DVector<f64>| -> f64 {
            let mut alpha: f64 = 1.0;
            for i in 0..m {
                if ds[i] < 0.0 {
                    alpha = alpha.min(-s[i] / ds[i]);
                }
                if dl[i] < 0.0 {
                    alpha = alpha.min(-lam[i] / dl[i]);
                }
            }
            alpha
        };

        let rc_aff = s.component_mul(&lam);
        let Some((_, ds_a, dl_a)) = direction(&rc_aff) else {
            return Err(OptimError::NumericalFailure { iterations: it });
        };
        let alpha_aff = step(&ds_a, &dl_a);
        let mu_aff = (&s + &ds_a * alpha_aff).dot(&(&lam + &dl_a * alpha_aff)) / m as f64;
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);
        let rc = rc_aff + ds_a.component_mul(&dl_a) - DVector::from_element(m, sigma * mu);
        let Some((dx, ds, dl)) = direction(&rc) else {
            return Err(OptimError::NumericalFailure { iterations: it });
        };
        let alpha = (0.995 * step(&ds, &dl)).min(1.0);
        x += &dx * alpha;
        s += &ds * alpha;
        lam += &dl * alpha;
        for i in 0..m {
            s[i] = s[i].max(1e-300);
            lam[i] = lam[i].max(1e-300);
        }
    }
    // Ill-conditioning near the solution can stall progress; accept a stalled
    // iterate whose residuals are still small.
    if best.0 <= IPM_ACCEPT_TOL {
        return Ok((best.1, best.2));
    }
    Err(OptimError::NumericalFailure { iterations: max_iter })
}
