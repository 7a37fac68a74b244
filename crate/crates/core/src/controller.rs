//! Robust MPC with an affine state-feedback policy `Δδ = −KΔx + v`.
//!
//! All stage and terminal constraints are expressed in terms of the current
//! error state and the auxiliary input sequence, tightened row by row against
//! the disturbance set and the feasible parameter set, then solved as an LP
//! (weighted 1-norm cost) or QP (quadratic cost).

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{solve_lp, solve_qp, LinearProgram, LpStatus, OptimError, QuadraticProgram};
use crate::polytope::{max_rpi_set, Polytope, PolytopeError, SupportOracle};
use crate::vehicle::DiscreteModel;

/// Slack values at or below this count as zero.
pub const SLACK_TOL: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid controller configuration: {0}")]
    InvalidConfig(String),
    #[error("robust MPC problem is infeasible")]
    Infeasible,
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
    #[error(transparent)]
    Solver(#[from] OptimError),
}

pub type Result<T> = std::result::Result<T, ControllerError>;

/// Mixed state/input constraints `CΔx + DΔδ ≤ b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl ConstraintSet {
    pub fn new(c: DMatrix<f64>, d: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if c.nrows() != b.len() || d.nrows() != b.len() {
            return Err(ControllerError::DimensionMismatch(format!(
                "C has {} rows, D has {}, b has {}",
                c.nrows(),
                d.nrows(),
                b.len()
            )));
        }
        Ok(Self { c, d, b })
    }

    /// `|e_cg| ≤ ecg_max`, `|δψ| ≤ dpsi_max`, `|Δδ| ≤ ddelta_max` on the error state.
    ///
    /// Rows come in `+/−` pairs in that order.
    pub fn lane_keeping(ecg_max: f64, dpsi_max: f64, ddelta_max: f64) -> Self {
        let mut c = DMatrix::zeros(6, 4);
        let mut d = DMatrix::zeros(6, 1);
        c[(0, 0)] = 1.0;
        c[(1, 0)] = -1.0;
        c[(2, 2)] = 1.0;
        c[(3, 2)] = -1.0;
        d[(4, 0)] = 1.0;
        d[(5, 0)] = -1.0;
        let b = DVector::from_vec(vec![ecg_max, ecg_max, dpsi_max, dpsi_max, ddelta_max, ddelta_max]);
        Self { c, d, b }
    }

    pub fn n_rows(&self) -> usize {
        self.b.len()
    }

    /// `C̄ = C − DK`.
    pub fn closed_loop_rows(&self, gain: &DMatrix<f64>) -> DMatrix<f64> {
        &self.c - &self.d * gain
    }

    /// `{x : (C − DK)x ≤ b}`.
    pub fn state_set(&self, gain: &DMatrix<f64>) -> Result<Polytope> {
        Ok(Polytope::new(self.closed_loop_rows(gain), self.b.clone())?)
    }

    /// `CΔx + DΔδ − b`; positive entries are violations.
    pub fn residuals(&self, dx: &DVector<f64>, d_delta: &DVector<f64>) -> DVector<f64> {
        &self.c * dx + &self.d * d_delta - &self.b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    /// `‖Q^{1/2}x̄‖₁ + ‖R^{1/2}v‖₁`, solved as an LP.
    OneNorm,
    /// `x̄ᵀQx̄ + vᵀRv`, solved as a QP.
    Quadratic,
}

/// How the offset is allowed to vary across the prediction horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaCoupling {
    /// An independent `θ ∈ Θ` at every step.
    PerStep,
    /// One `θ ∈ Θ` shared by all steps.
    Constant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub horizon: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub cost_mode: CostMode,
    /// Penalty per unit of constraint violation in softened mode.
    pub rho: f64,
    pub terminal_max_iter: usize,
    /// Recompute the terminal set every this many steps.
    pub terminal_recompute_every: usize,
    pub theta_constant_over_horizon: bool,
}

impl ControllerConfig {
    pub fn lane_keeping() -> Self {
        Self {
            horizon: 6,
            q: DMatrix::from_diagonal_element(4, 4, 2.0),
            r: DMatrix::from_element(1, 1, 1.0),
            cost_mode: CostMode::OneNorm,
            rho: 1e4,
            terminal_max_iter: 200,
            terminal_recompute_every: 1,
            theta_constant_over_horizon: false,
        }
    }

    pub fn coupling(&self) -> ThetaCoupling {
        if self.theta_constant_over_horizon {
            ThetaCoupling::Constant
        } else {
            ThetaCoupling::PerStep
        }
    }

    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        if self.horizon == 0 {
            return Err(ControllerError::InvalidConfig("horizon must be at least 1".into()));
        }
        if !(self.rho > 0.0) {
            return Err(ControllerError::InvalidConfig(format!(
                "rho must be positive, got {}",
                self.rho
            )));
        }
        if self.terminal_recompute_every == 0 {
            return Err(ControllerError::InvalidConfig(
                "terminal_recompute_every must be at least 1".into(),
            ));
        }
        if self.q.shape() != (n, n) || self.r.shape() != (m, m) {
            return Err(ControllerError::DimensionMismatch(format!(
                "Q is {:?} and R is {:?} for {n} states and {m} inputs",
                self.q.shape(),
                self.r.shape()
            )));
        }
        psd_sqrt(&self.q, false)?;
        psd_sqrt(&self.r, true)?;
        Ok(())
    }
}

/// Symmetric square root of a PSD (or, with `strict`, PD) matrix.
fn psd_sqrt(m: &DMatrix<f64>, strict: bool) -> Result<DMatrix<f64>> {
    if (m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
        return Err(ControllerError::InvalidConfig("weight matrix is not symmetric".into()));
    }
    let eig = m.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min < -1e-12 || (strict && min <= 0.0) {
        return Err(ControllerError::InvalidConfig(format!(
            "weight matrix has eigenvalue {min}"
        )));
    }
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// Constraints `F v + G(𝐰 + 𝐄𝛉) ≤ c + HΔx` over the horizon, plus the nominal
/// prediction `x̄ₖ = Φₖ Δx + Γₖ v`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedMpcProblem {
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub c: DVector<f64>,
    pub h: DMatrix<f64>,
    /// Per-row worst-case uncertainty contribution; zero until tightened.
    pub tightening: DVector<f64>,
    pub terminal: Polytope,
    pub horizon: usize,
    /// Rows per stage, `s`.
    pub stage_rows: usize,
    pub e: DMatrix<f64>,
    /// Stacked `A_clᵏ` for `k = 0..=N`.
    pub phi: DMatrix<f64>,
    /// Stacked input-to-state map for `k = 0..=N`.
    pub gamma: DMatrix<f64>,
}

impl StackedMpcProblem {
    pub fn n_states(&self) -> usize {
        self.e.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.f.ncols() / self.horizon
    }

    pub fn n_rows(&self) -> usize {
        self.c.len()
    }

    pub fn terminal_rows(&self) -> usize {
        self.n_rows() - self.stage_rows * self.horizon
    }

    /// Right-hand side `c − g̃ + HΔx`.
    pub fn rhs(&self, dx: &DVector<f64>) -> DVector<f64> {
        &self.c - &self.tightening + &self.h * dx
    }

    /// Nominal states `x̄₀..x̄_N` for input sequence `v`.
    pub fn nominal_states(&self, dx: &DVector<f64>, v: &DVector<f64>) -> Vec<DVector<f64>> {
        let n = self.n_states();
        let stacked = &self.phi * dx + &self.gamma * v;
        (0..=self.horizon)
            .map(|k| stacked.rows(k * n, n).into_owned())
            .collect()
    }

    /// Block `j` of row `i` of `G`.
    fn g_block(&self, i: usize, j: usize) -> DVector<f64> {
        let n = self.n_states();
        DVector::from_iterator(n, self.g.view((i, j * n), (1, n)).iter().copied())
    }

    /// Row-wise tightening `g̃ᵢ = max over 𝕎 and Θ of Gᵢ(𝐰 + 𝐄𝛉)`.
    pub fn tighten(&self, w: &Polytope, theta: &Polytope, coupling: ThetaCoupling) -> Result<StackedMpcProblem> {
        let n = self.n_states();
        if w.dim() != n || theta.dim() != self.e.ncols() {
            return Err(ControllerError::DimensionMismatch(format!(
                "disturbance set dim {} and parameter set dim {} for E of shape {:?}",
                w.dim(),
                theta.dim(),
                self.e.shape()
            )));
        }
        let w_oracle = SupportOracle::new(w)?;
        let t_oracle = SupportOracle::new(theta)?;
        let et = self.e.transpose();
        let mut tightening = DVector::zeros(self.n_rows());
        for i in 0..self.n_rows() {
            let mut total = 0.0;
            let mut summed = DVector::zeros(n);
            for j in 0..self.horizon {
                let g = self.g_block(i, j);
                if g.iter().all(|v| *v == 0.0) {
                    continue;
                }
                total += w_oracle.support(&g)?;
                match coupling {
                    ThetaCoupling::PerStep => total += t_oracle.support(&(&et * &g))?,
                    ThetaCoupling::Constant => summed += &g,
                }
            }
            if coupling == ThetaCoupling::Constant {
                total += t_oracle.support(&(&et * &summed))?;
            }
            tightening[i] = total;
        }
        let mut out = self.clone();
        out.tightening = tightening;
        Ok(out)
    }
}

/// Builds the stacked constraint matrices for horizon `horizon`.
pub fn build_stacked(
    model: &DiscreteModel,
    gain: &DMatrix<f64>,
    cons: &ConstraintSet,
    terminal: &Polytope,
    horizon: usize,
) -> Result<StackedMpcProblem> {
    let n = model.n_states();
    let m = model.n_inputs();
    if horizon == 0 {
        return Err(ControllerError::InvalidConfig("horizon must be at least 1".into()));
    }
    if gain.shape() != (m, n) {
        return Err(ControllerError::DimensionMismatch(format!(
            "gain is {:?}, expected ({m}, {n})",
            gain.shape()
        )));
    }
    if cons.c.ncols() != n || cons.d.ncols() != m {
        return Err(ControllerError::DimensionMismatch(format!(
            "constraints act on {} states and {} inputs",
            cons.c.ncols(),
            cons.d.ncols()
        )));
    }
    if terminal.dim() != n {
        return Err(ControllerError::DimensionMismatch(format!(
            "terminal set has dim {}",
            terminal.dim()
        )));
    }
    let a_cl = model.closed_loop(gain);
    let mut powers = vec![DMatrix::identity(n, n)];
    for k in 1..=horizon {
        let next = &a_cl * &powers[k - 1];
        powers.push(next);
    }
    let c_bar = cons.closed_loop_rows(gain);
    let s = cons.n_rows();
    let y = terminal.normals();
    let r_t = terminal.n_rows();
    let rows = s * horizon + r_t;

    let mut f = DMatrix::zeros(rows, m * horizon);
    let mut g = DMatrix::zeros(rows, n * horizon);
    let mut c = DVector::zeros(rows);
    let mut h = DMatrix::zeros(rows, n);
    for k in 0..horizon {
        let r0 = k * s;
        f.view_mut((r0, k * m), (s, m)).copy_from(&cons.d);
        for j in 0..k {
            let p = &powers[k - 1 - j];
            f.view_mut((r0, j * m), (s, m)).copy_from(&(&c_bar * p * &model.b1));
            g.view_mut((r0, j * n), (s, n)).copy_from(&(&c_bar * p));
        }
        c.rows_mut(r0, s).copy_from(&cons.b);
        h.view_mut((r0, 0), (s, n)).copy_from(&(-&c_bar * &powers[k]));
    }
    let r0 = s * horizon;
    for j in 0..horizon {
        let p = &powers[horizon - 1 - j];
        f.view_mut((r0, j * m), (r_t, m)).copy_from(&(y * p * &model.b1));
        g.view_mut((r0, j * n), (r_t, n)).copy_from(&(y * p));
    }
    c.rows_mut(r0, r_t).copy_from(terminal.offsets());
    h.view_mut((r0, 0), (r_t, n)).copy_from(&(-y * &powers[horizon]));

    let mut phi = DMatrix::zeros(n * (horizon + 1), n);
    let mut gamma = DMatrix::zeros(n * (horizon + 1), m * horizon);
    for k in 0..=horizon {
        phi.view_mut((k * n, 0), (n, n)).copy_from(&powers[k]);
        for j in 0..k {
            gamma
                .view_mut((k * n, j * m), (n, m))
                .copy_from(&(&powers[k - 1 - j] * &model.b1));
        }
    }

    Ok(StackedMpcProblem {
        f,
        g,
        c,
        h,
        tightening: DVector::zeros(rows),
        terminal: terminal.clone(),
        horizon,
        stage_rows: s,
        e: model.e.clone(),
        phi,
        gamma,
    })
}

/// Largest deviation between the row-wise tightening and the optimum of the
/// dual LP `min hᵀz s.t. Sᵀz = [Gᵢ, Gᵢ𝐄]ᵀ, z ≥ 0`, where `S z ≤ h` describes
/// the product of the per-step disturbance and parameter sets.
pub fn dual_reformulation_check(
    p: &StackedMpcProblem,
    w: &Polytope,
    theta: &Polytope,
    coupling: ThetaCoupling,
) -> Result<f64> {
    let n = p.n_states();
    let np = p.e.ncols();
    let n_w = p.horizon;
    let n_theta = match coupling {
        ThetaCoupling::PerStep => p.horizon,
        ThetaCoupling::Constant => 1,
    };
    let cols = n * n_w + np * n_theta;
    let a_rows = w.n_rows() * n_w + theta.n_rows() * n_theta;
    let mut s = DMatrix::zeros(a_rows, cols);
    let mut hz = DVector::zeros(a_rows);
    for k in 0..n_w {
        let (r0, c0) = (k * w.n_rows(), k * n);
        s.view_mut((r0, c0), (w.n_rows(), n)).copy_from(w.normals());
        hz.rows_mut(r0, w.n_rows()).copy_from(w.offsets());
    }
    for k in 0..n_theta {
        let (r0, c0) = (n_w * w.n_rows() + k * theta.n_rows(), n * n_w + k * np);
        s.view_mut((r0, c0), (theta.n_rows(), np)).copy_from(theta.normals());
        hz.rows_mut(r0, theta.n_rows()).copy_from(theta.offsets());
    }
    let st = s.transpose();
    let mut a_eq = DMatrix::zeros(2 * cols, a_rows);
    a_eq.view_mut((0, 0), (cols, a_rows)).copy_from(&st);
    a_eq.view_mut((cols, 0), (cols, a_rows)).copy_from(&(-&st));

    let mut worst: f64 = 0.0;
    for i in 0..p.n_rows() {
        let mut target = DVector::zeros(cols);
        for j in 0..p.horizon {
            let g = p.g_block(i, j);
            target.rows_mut(j * n, n).copy_from(&g);
            let eg = p.e.transpose() * &g;
            let k = if coupling == ThetaCoupling::PerStep { j } else { 0 };
            let mut slot = target.rows_mut(n * n_w + k * np, np);
            slot += &eg;
        }
        let mut rhs = DVector::zeros(2 * cols);
        rhs.rows_mut(0, cols).copy_from(&target);
        rhs.rows_mut(cols, cols).copy_from(&(-&target));
        let lp = LinearProgram::new(hz.clone(), a_eq.clone(), rhs)
            .with_bounds(vec![0.0; a_rows], vec![f64::INFINITY; a_rows]);
        let sol = solve_lp(&lp)?;
        if sol.status != LpStatus::Optimal {
            return Err(ControllerError::Solver(OptimError::MalformedProblem(format!(
                "dual tightening LP for row {i} is {:?}",
                sol.status
            ))));
        }
        worst = worst.max((sol.objective_value - p.tightening[i]).abs());
    }
    Ok(worst)
}

/// Maximal robust positive invariant set of `x⁺ = A_cl x + w + Eθ` inside `{C̄x ≤ b}`.
pub fn terminal_set(
    model: &DiscreteModel,
    gain: &DMatrix<f64>,
    cons: &ConstraintSet,
    w: &Polytope,
    theta: &Polytope,
    max_iter: usize,
) -> Result<Polytope> {
    if w.dim() != model.n_states() || theta.dim() != model.n_params() {
        return Err(ControllerError::DimensionMismatch(format!(
            "disturbance set dim {} and parameter set dim {}",
            w.dim(),
            theta.dim()
        )));
    }
    let w_oracle = SupportOracle::new(w)?;
    let t_oracle = SupportOracle::new(theta)?;
    let et = model.e.transpose();
    let mut support =
        |d: &DVector<f64>| -> crate::polytope::Result<f64> { Ok(w_oracle.support(d)? + t_oracle.support(&(&et * d))?) };
    let a_cl = model.closed_loop(gain);
    Ok(max_rpi_set(&a_cl, &mut support, &cons.state_set(gain)?, max_iter)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MpcStatus {
    Feasible,
    SoftenedFeasible,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    /// `v_{t|t}, …, v_{t+N−1|t}` stacked.
    pub v_sequence: DVector<f64>,
    pub status: MpcStatus,
    /// Per-row slack; all zero in hard mode.
    pub slacks: DVector<f64>,
    pub objective: f64,
    /// Nominal predicted states `x̄₀..x̄_N`.
    pub predicted: Vec<DVector<f64>>,
}

impl MpcSolution {
    pub fn first_input(&self) -> DVector<f64> {
        let m = self.v_sequence.len() / (self.predicted.len() - 1);
        self.v_sequence.rows(0, m).into_owned()
    }

    pub fn slack_sum(&self) -> f64 {
        self.slacks.sum()
    }
}

/// Solves the tightened problem from error state `dx`. With `soften`, every
/// row gets a nonnegative slack penalized by `cfg.rho`.
pub fn solve(p: &StackedMpcProblem, dx: &DVector<f64>, cfg: &ControllerConfig, soften: bool) -> Result<MpcSolution> {
    let n = p.n_states();
    let m = p.n_inputs();
    let big_n = p.horizon;
    if dx.len() != n {
        return Err(ControllerError::DimensionMismatch(format!(
            "state has length {}, expected {n}",
            dx.len()
        )));
    }
    if cfg.horizon != big_n {
        return Err(ControllerError::DimensionMismatch(format!(
            "config horizon {} differs from problem horizon {big_n}",
            cfg.horizon
        )));
    }
    cfg.validate(n, m)?;
    if dx.iter().any(|v| !v.is_finite()) {
        return Err(ControllerError::DimensionMismatch("state is not finite".into()));
    }
    let rows = p.n_rows();
    let nv = m * big_n;
    let n_slack = if soften { rows } else { 0 };
    let rhs = p.rhs(dx);
    let free_x = p.phi.rows(0, n * big_n) * dx;
    let gamma = p.gamma.rows(0, n * big_n);

    let (sol, slack_offset) = match cfg.cost_mode {
        CostMode::OneNorm => {
            let q_half = psd_sqrt(&cfg.q, false)?;
            let r_half = psd_sqrt(&cfg.r, true)?;
            // Stage 0 state cost is fixed by `dx`.
            let n_sx = n * (big_n - 1);
            let n_su = m * big_n;
            let vars = nv + n_sx + n_su + n_slack;
            let n_con = rows + 2 * n_sx + 2 * n_su;
            let mut a = DMatrix::zeros(n_con, vars);
            let mut b = DVector::zeros(n_con);
            a.view_mut((0, 0), (rows, nv)).copy_from(&p.f);
            b.rows_mut(0, rows).copy_from(&rhs);
            let slack0 = nv + n_sx + n_su;
            for i in 0..n_slack {
                a[(i, slack0 + i)] = -1.0;
            }
            let mut r = rows;
            for k in 1..big_n {
                let qg = &q_half * gamma.rows(k * n, n);
                let qx = &q_half * free_x.rows(k * n, n);
                for sign in [1.0, -1.0] {
                    a.view_mut((r, 0), (n, nv)).copy_from(&(&qg * sign));
                    for i in 0..n {
                        a[(r + i, nv + (k - 1) * n + i)] = -1.0;
                    }
                    b.rows_mut(r, n).copy_from(&(&qx * -sign));
                    r += n;
                }
            }
            for k in 0..big_n {
                for sign in [1.0, -1.0] {
                    a.view_mut((r, k * m), (m, m)).copy_from(&(&r_half * sign));
                    for i in 0..m {
                        a[(r + i, nv + n_sx + k * m + i)] = -1.0;
                    }
                    r += m;
                }
            }
            let mut cost = DVector::zeros(vars);
            cost.rows_mut(nv, n_sx + n_su).fill(1.0);
            cost.rows_mut(slack0, n_slack).fill(cfg.rho);
            let mut lower = vec![f64::NEG_INFINITY; vars];
            for l in lower.iter_mut().skip(nv) {
                *l = 0.0;
            }
            let lp = LinearProgram::new(cost, a, b).with_bounds(lower, vec![f64::INFINITY; vars]);
            (solve_lp(&lp)?, slack0)
        }
        CostMode::Quadratic => {
            let vars = nv + n_slack;
            let mut q_big = DMatrix::zeros(n * big_n, n * big_n);
            let mut r_big = DMatrix::zeros(nv, nv);
            for k in 0..big_n {
                q_big.view_mut((k * n, k * n), (n, n)).copy_from(&cfg.q);
                r_big.view_mut((k * m, k * m), (m, m)).copy_from(&cfg.r);
            }
            let mut quad = DMatrix::zeros(vars, vars);
            quad.view_mut((0, 0), (nv, nv))
                .copy_from(&(gamma.transpose() * &q_big * gamma + r_big));
            let quad = (&quad + quad.transpose()) * 0.5;
            let mut lin = DVector::zeros(vars);
            lin.rows_mut(0, nv)
                .copy_from(&(gamma.transpose() * &q_big * &free_x * 2.0));
            lin.rows_mut(nv, n_slack).fill(cfg.rho);
            let mut a = DMatrix::zeros(rows, vars);
            a.view_mut((0, 0), (rows, nv)).copy_from(&p.f);
            for i in 0..n_slack {
                a[(i, nv + i)] = -1.0;
            }
            let mut lower = vec![f64::NEG_INFINITY; vars];
            for l in lower.iter_mut().skip(nv) {
                *l = 0.0;
            }
            let qp = QuadraticProgram::new(quad, lin, a, rhs).with_bounds(lower, vec![f64::INFINITY; vars]);
            (solve_qp(&qp)?, nv)
        }
    };

    match sol.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => return Err(ControllerError::Infeasible),
        LpStatus::Unbounded => {
            return Err(ControllerError::Solver(OptimError::MalformedProblem(
                "MPC cost is unbounded".into(),
            )))
        }
    }
    let v = sol.primal.rows(0, nv).into_owned();
    let slacks = if soften {
        sol.primal
            .rows(slack_offset, n_slack)
            .map(|s| if s > SLACK_TOL { s } else { 0.0 })
    } else {
        DVector::zeros(rows)
    };
    let status = if slacks.iter().any(|s| *s > 0.0) {
        MpcStatus::SoftenedFeasible
    } else {
        MpcStatus::Feasible
    };
    let predicted = p.nominal_states(dx, &v);
    let objective = stage_cost(cfg, &predicted, &v)? + cfg.rho * slacks.sum();
    Ok(MpcSolution {
        predicted,
        v_sequence: v,
        status,
        slacks,
        objective,
    })
}

/// `Σₖ ℓ(x̄ₖ, vₖ)` over the horizon for the configured cost mode.
pub fn stage_cost(cfg: &ControllerConfig, predicted: &[DVector<f64>], v: &DVector<f64>) -> Result<f64> {
    let m = cfg.r.nrows();
    let mut total = 0.0;
    match cfg.cost_mode {
        CostMode::OneNorm => {
            let q_half = psd_sqrt(&cfg.q, false)?;
            let r_half = psd_sqrt(&cfg.r, true)?;
            for k in 0..cfg.horizon {
                total += (&q_half * &predicted[k]).abs().sum();
                total += (&r_half * v.rows(k * m, m)).abs().sum();
            }
        }
        CostMode::Quadratic => {
            for k in 0..cfg.horizon {
                total += predicted[k].dot(&(&cfg.q * &predicted[k]));
                let vk = v.rows(k * m, m);
                total += vk.dot(&(&cfg.r * vk));
            }
        }
    }
    Ok(total)
}

/// The steering command and its deviation from the steady state.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringCommand {
    pub delta: DVector<f64>,
    pub d_delta: DVector<f64>,
}

/// `Δδ = −KΔx + v⋆` and `δ = δ_ss + Δδ`.
pub fn closed_loop_input(
    sol: &MpcSolution,
    gain: &DMatrix<f64>,
    dx: &DVector<f64>,
    delta_ss: &DVector<f64>,
) -> SteeringCommand {
    let d_delta = -(gain * dx) + sol.first_input();
    SteeringCommand {
        delta: delta_ss + &d_delta,
        d_delta,
    }
}

/// Row vector gain as the `1 × n` matrix the controller expects.
pub fn gain_matrix(k: &RowDVector<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(1, k.len(), k.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};

    /// `x⁺ = x + u + w`, `|x| ≤ 1`, `|u| ≤ 1`, with the scalar LQR gain for `Q = R = 1`.
    fn toy() -> (DiscreteModel, DMatrix<f64>, ConstraintSet) {
        let model = DiscreteModel::new(dmatrix![1.0], dmatrix![1.0], dmatrix![0.0], 1.0).unwrap();
        let golden = (1.0 + 5f64.sqrt()) / 2.0;
        let k = dmatrix![golden / (1.0 + golden)];
        let cons = ConstraintSet::new(
            dmatrix![1.0; -1.0; 0.0; 0.0],
            dmatrix![0.0; 0.0; 1.0; -1.0],
            dvector![1.0, 1.0, 1.0, 1.0],
        )
        .unwrap();
        (model, k, cons)
    }

    fn toy_cfg() -> ControllerConfig {
        ControllerConfig {
            horizon: 2,
            q: dmatrix![1.0],
            r: dmatrix![1.0],
            ..ControllerConfig::lane_keeping()
        }
    }

    #[test]
    fn lane_keeping_constraints() {
        let cons = ConstraintSet::lane_keeping(4.0, 0.7, std::f64::consts::FRAC_PI_3);
        assert_eq!(cons.n_rows(), 6);
        let r = cons.residuals(&dvector![4.5, 0.0, -0.1, 0.0], &dvector![0.0]);
        assert_abs_diff_eq!(r[0], 0.5, epsilon = 1e-15);
        assert!(r.iter().skip(1).all(|v| *v < 0.0));
    }

    #[test]
    fn horizon_one_block_structure() {
        let (model, k, cons) = toy();
        let terminal = Polytope::from_box(&[-0.8], &[0.9]).unwrap();
        let p = build_stacked(&model, &k, &cons, &terminal, 1).unwrap();
        let a_cl = 1.0 - k[(0, 0)];
        let c_bar = cons.closed_loop_rows(&k);
        assert_eq!(p.n_rows(), 4 + 2);
        // F = [D; Y B₁], G = [0; Y], c = [b; z], H = −[C̄; Y A_cl]
        for i in 0..4 {
            assert_eq!(p.f[(i, 0)], cons.d[(i, 0)]);
            assert_eq!(p.g[(i, 0)], 0.0);
            assert_eq!(p.c[i], 1.0);
            assert_abs_diff_eq!(p.h[(i, 0)], -c_bar[(i, 0)], epsilon = 1e-15);
        }
        let y = terminal.normals();
        for i in 0..2 {
            assert_eq!(p.f[(4 + i, 0)], y[(i, 0)]);
            assert_eq!(p.g[(4 + i, 0)], y[(i, 0)]);
            assert_eq!(p.c[4 + i], terminal.offsets()[i]);
            assert_abs_diff_eq!(p.h[(4 + i, 0)], -y[(i, 0)] * a_cl, epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_gain_keeps_open_loop_matrices() {
        let model = DiscreteModel::new(
            dmatrix![1.0, 0.1; 0.0, 1.0],
            dmatrix![0.0; 0.1],
            dmatrix![0.1; 0.1],
            0.1,
        )
        .unwrap();
        let cons = ConstraintSet::new(
            dmatrix![1.0, 0.0; 0.0, 1.0; 0.0, 0.0],
            dmatrix![0.0; 0.0; 1.0],
            dvector![1.0, 1.0, 1.0],
        )
        .unwrap();
        let k = DMatrix::zeros(1, 2);
        let terminal = Polytope::hypercube(2, 0.5).unwrap();
        let p = build_stacked(&model, &k, &cons, &terminal, 3).unwrap();
        assert_eq!(p.n_rows(), 3 * 3 + 4);
        // Stage 2 state rows see C·A·B₁ on the first input.
        let expected = &cons.c * &model.a * &model.b1;
        for i in 0..3 {
            assert_abs_diff_eq!(p.f[(6 + i, 0)], expected[(i, 0)], epsilon = 1e-15);
        }
        let h2 = -(&cons.c * &model.a * &model.a);
        assert_abs_diff_eq!(p.h.view((6, 0), (3, 2)).into_owned(), h2, epsilon = 1e-15);
    }

    #[test]
    fn tightening_closed_forms() {
        let (model, k, cons) = toy();
        let terminal = Polytope::from_box(&[-1.0], &[1.0]).unwrap();
        let p = build_stacked(&model, &k, &cons, &terminal, 2).unwrap();
        let w = Polytope::hypercube(1, 0.1).unwrap();
        let zero = Polytope::point(&[0.0]).unwrap();
        let t = p.tighten(&w, &zero, ThetaCoupling::PerStep).unwrap();
        let a_cl = 1.0 - k[(0, 0)];
        // stage 0 rows see no uncertainty
        for i in 0..4 {
            assert_eq!(t.tightening[i], 0.0);
        }
        // stage 1: |C̄ᵢ|·0.1
        let c_bar = cons.closed_loop_rows(&k);
        for i in 0..4 {
            assert_abs_diff_eq!(t.tightening[4 + i], 0.1 * c_bar[(i, 0)].abs(), epsilon = 1e-15);
        }
        // terminal: 0.1 (|A_cl| + 1)
        for i in 8..10 {
            assert_abs_diff_eq!(t.tightening[i], 0.1 * (a_cl.abs() + 1.0), epsilon = 1e-15);
        }
    }

    #[test]
    fn tightening_with_parameter_set() {
        // Single-block row g with 𝕎 = ∞-ball(0.5): 0.5‖g‖₁ + support(Θ₀, Eᵀg)
        let model = DiscreteModel::new(
            DMatrix::identity(4, 4),
            DMatrix::zeros(4, 1),
            DMatrix::from_element(4, 2, 0.1),
            0.1,
        )
        .unwrap();
        let cons = ConstraintSet::lane_keeping(4.0, 0.7, 1.0);
        let k = DMatrix::zeros(1, 4);
        let terminal = Polytope::hypercube(4, 10.0).unwrap();
        let p = build_stacked(&model, &k, &cons, &terminal, 2).unwrap();
        let w = Polytope::hypercube(4, 0.5).unwrap();
        let theta = Polytope::from_box(&[-0.2, -0.3], &[0.2, 0.3]).unwrap();
        let t = p.tighten(&w, &theta, ThetaCoupling::PerStep).unwrap();
        // row 6 is stage 1, +e_cg: g = e₁, Eᵀg = (0.1, 0.1)
        assert_abs_diff_eq!(t.tightening[6], 0.5 + 0.1 * 0.2 + 0.1 * 0.3, epsilon = 1e-12);
        // input rows never see uncertainty with K = 0
        assert_eq!(t.tightening[10], 0.0);
    }

    #[test]
    fn dual_check_matches_tightening() {
        let (model, k, cons) = toy();
        let terminal = Polytope::from_box(&[-1.0], &[1.0]).unwrap();
        let model = DiscreteModel::new(model.a.clone(), model.b1.clone(), dmatrix![0.5], 1.0).unwrap();
        let p = build_stacked(&model, &k, &cons, &terminal, 3).unwrap();
        let w = Polytope::hypercube(1, 0.1).unwrap();
        for theta in [
            Polytope::from_box(&[-0.1], &[0.05]).unwrap(),
            Polytope::point(&[0.02]).unwrap(),
        ] {
            for coupling in [ThetaCoupling::PerStep, ThetaCoupling::Constant] {
                let t = p.tighten(&w, &theta, coupling).unwrap();
                assert!(dual_reformulation_check(&t, &w, &theta, coupling).unwrap() <= 1e-7);
            }
        }
    }

    #[test]
    fn origin_is_optimal_at_equilibrium() {
        let (model, k, cons) = toy();
        let cfg = toy_cfg();
        let w = Polytope::hypercube(1, 1e-6).unwrap();
        let zero = Polytope::point(&[0.0]).unwrap();
        let terminal = terminal_set(&model, &k, &cons, &w, &zero, 200).unwrap();
        let p = build_stacked(&model, &k, &cons, &terminal, 2)
            .unwrap()
            .tighten(&w, &zero, ThetaCoupling::PerStep)
            .unwrap();
        let sol = solve(&p, &dvector![0.0], &cfg, false).unwrap();
        assert_eq!(sol.status, MpcStatus::Feasible);
        assert_abs_diff_eq!(sol.objective, 0.0, epsilon = 1e-9);
        assert!(sol.v_sequence.amax() <= 1e-9);
    }

    #[test]
    fn far_state_is_infeasible_hard_and_softened_soft() {
        let (model, k, cons) = toy();
        let cfg = toy_cfg();
        let w = Polytope::hypercube(1, 0.1).unwrap();
        let zero = Polytope::point(&[0.0]).unwrap();
        let terminal = terminal_set(&model, &k, &cons, &w, &zero, 200).unwrap();
        let p = build_stacked(&model, &k, &cons, &terminal, 2)
            .unwrap()
            .tighten(&w, &zero, ThetaCoupling::PerStep)
            .unwrap();
        let mut x = 0.5;
        while solve(&p, &dvector![x], &cfg, false).is_ok() {
            x *= 1.2;
            assert!(x < 100.0);
        }
        assert_eq!(
            solve(&p, &dvector![x], &cfg, false).unwrap_err(),
            ControllerError::Infeasible
        );
        let soft = solve(&p, &dvector![x], &cfg, true).unwrap();
        assert_eq!(soft.status, MpcStatus::SoftenedFeasible);
        assert!(soft.slack_sum() > 0.0);
    }

    #[test]
    fn soft_mode_matches_hard_mode_when_feasible() {
        let (model, k, cons) = toy();
        let w = Polytope::hypercube(1, 0.1).unwrap();
        let zero = Polytope::point(&[0.0]).unwrap();
        let terminal = terminal_set(&model, &k, &cons, &w, &zero, 200).unwrap();
        let p = build_stacked(&model, &k, &cons, &terminal, 2)
            .unwrap()
            .tighten(&w, &zero, ThetaCoupling::PerStep)
            .unwrap();
        for mode in [CostMode::OneNorm, CostMode::Quadratic] {
            let cfg = ControllerConfig {
                cost_mode: mode,
                ..toy_cfg()
            };
            for x in [-0.7, -0.2, 0.3, 0.8] {
                let hard = solve(&p, &dvector![x], &cfg, false).unwrap();
                let soft = solve(&p, &dvector![x], &cfg, true).unwrap();
                assert_eq!(soft.status, MpcStatus::Feasible);
                assert!(soft.objective <= hard.objective + 1e-6);
                assert_abs_diff_eq!(soft.objective, hard.objective, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn quadratic_mode_beats_sampled_feasible_sequences() {
        let (model, k, cons) = toy();
        let w = Polytope::hypercube(1, 0.1).unwrap();
        let zero = Polytope::point(&[0.0]).unwrap();
        let terminal = terminal_set(&model, &k, &cons, &w, &zero, 200).unwrap();
        let p = build_stacked(&model, &k, &cons, &terminal, 2)
            .unwrap()
            .tighten(&w, &zero, ThetaCoupling::PerStep)
            .unwrap();
        let cfg = ControllerConfig {
            cost_mode: CostMode::Quadratic,
            ..toy_cfg()
        };
        let x = dvector![0.6];
        let sol = solve(&p, &x, &cfg, false).unwrap();
        let rhs = p.rhs(&x);
        let mut samples = 0;
        for i in 0..=40 {
            for j in 0..=40 {
                let v = dvector![-1.0 + 0.05 * i as f64, -1.0 + 0.05 * j as f64];
                if (&p.f * &v - &rhs).max() > 0.0 {
                    continue;
                }
                samples += 1;
                let xs = p.nominal_states(&x, &v);
                let cost = xs[0][0].powi(2) + xs[1][0].powi(2) + v.norm_squared();
                assert!(sol.objective <= cost + 1e-7);
            }
        }
        assert!(samples > 10);
    }

    #[test]
    fn closed_loop_input_algebra() {
        let sol = MpcSolution {
            v_sequence: dvector![0.1, 0.0],
            status: MpcStatus::Feasible,
            slacks: DVector::zeros(1),
            objective: 0.0,
            predicted: vec![dvector![0.0]; 3],
        };
        let k = dmatrix![0.5];
        let cmd = closed_loop_input(&sol, &k, &dvector![0.2], &dvector![0.03]);
        assert_abs_diff_eq!(cmd.d_delta[0], -0.1 + 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(cmd.delta[0], 0.03 + cmd.d_delta[0], epsilon = 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ControllerConfig::lane_keeping();
        assert!(cfg.validate(4, 1).is_ok());
        cfg.horizon = 0;
        assert!(cfg.validate(4, 1).is_err());
        let cfg = ControllerConfig {
            rho: 0.0,
            ..ControllerConfig::lane_keeping()
        };
        assert!(cfg.validate(4, 1).is_err());
        let cfg = ControllerConfig {
            r: dmatrix![0.0],
            ..ControllerConfig::lane_keeping()
        };
        assert!(cfg.validate(4, 1).is_err());
    }
}
