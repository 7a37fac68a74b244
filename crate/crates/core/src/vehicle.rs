//! Lateral vehicle dynamics in road-aligned error coordinates.
//!
//! State ordering is `(e_cg, ė_cg, δψ, δψ̇)`: lateral offset of the centre of
//! gravity, its rate, heading error relative to the road, and its rate. The
//! single input is the front steering angle.

use nalgebra::{DMatrix, DVector, Matrix2, RowDVector, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STATE_DIM: usize = 4;

/// DARE fixed-point iteration cap.
pub const RICCATI_MAX_ITER: usize = 10_000;
/// Stopping threshold on successive Riccati iterates.
pub const RICCATI_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VehicleError {
    #[error("invalid vehicle parameter {name} = {value}")]
    InvalidParams { name: &'static str, value: f64 },
    #[error("sampling time must be positive, got {0}")]
    InvalidTs(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("steady-state equilibrium system is singular")]
    SingularEquilibrium,
    #[error("Riccati iteration diverged after {iterations} iterations (residual {residual:e})")]
    RiccatiDiverged { iterations: usize, residual: f64 },
    #[error("closed loop is unstable (spectral radius {spectral_radius})")]
    Unstabilizable { spectral_radius: f64 },
}

pub type Result<T> = std::result::Result<T, VehicleError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    /// kg
    pub mass: f64,
    /// kg·m²
    pub yaw_inertia: f64,
    /// Centre of gravity to front axle, m.
    pub lf: f64,
    /// Centre of gravity to rear axle, m.
    pub lr: f64,
    /// Front cornering stiffness, N/rad.
    pub cf: f64,
    /// Rear cornering stiffness, N/rad.
    pub cr: f64,
    /// Longitudinal speed, m/s.
    pub vx: f64,
}

impl VehicleParams {
    /// The mid-size sedan used throughout the examples, at speed `vx`.
    pub fn sedan(vx: f64) -> Self {
        Self {
            mass: 1830.0,
            yaw_inertia: 3477.0,
            lf: 1.152,
            lr: 1.693,
            cf: 40703.0,
            cr: 64495.0,
            vx,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("mass", self.mass),
            ("yaw_inertia", self.yaw_inertia),
            ("lf", self.lf),
            ("lr", self.lr),
            ("cf", self.cf),
            ("cr", self.cr),
            ("vx", self.vx),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(VehicleError::InvalidParams { name, value });
            }
        }
        Ok(())
    }
}

/// `ẋ = A_c x + B1_c δ + B2_c r + E_c θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousModel {
    pub params: VehicleParams,
    pub a: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub e: DMatrix<f64>,
}

/// `Δx⁺ = A Δx + B1 Δδ + E θ + w`, a forward-Euler discretization or any
/// other linear model with the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteModel {
    pub a: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub ts: f64,
}

impl DiscreteModel {
    pub fn new(a: DMatrix<f64>, b1: DMatrix<f64>, e: DMatrix<f64>, ts: f64) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b1.nrows() != n || e.nrows() != n {
            return Err(VehicleError::DimensionMismatch(format!(
                "A {:?}, B1 {:?}, E {:?}",
                a.shape(),
                b1.shape(),
                e.shape()
            )));
        }
        Ok(Self { a, b1, e, ts })
    }

    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.b1.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.e.ncols()
    }

    /// `A − B1 K`.
    pub fn closed_loop(&self, gain: &DMatrix<f64>) -> DMatrix<f64> {
        &self.a - &self.b1 * gain
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    /// Signed curvature, 1/m.
    pub curvature: f64,
    /// Arc length covered by the segment, m.
    pub length: f64,
}

impl RoadSegment {
    pub fn yaw_rate(&self, vx: f64) -> f64 {
        self.curvature * vx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    pub x_ss: DVector<f64>,
    pub delta_ss: f64,
    pub delta_ff: f64,
    /// Rear slip angle, rad.
    pub alpha_r: f64,
    /// Understeer gradient, rad·s²/m.
    pub understeer_gradient: f64,
}

/// Lateral-dynamics matrices for `params`; `e_c` is the continuous offset gain.
pub fn build_continuous(params: &VehicleParams, e_c: &DMatrix<f64>) -> Result<ContinuousModel> {
    params.validate()?;
    if e_c.nrows() != STATE_DIM {
        return Err(VehicleError::DimensionMismatch(format!(
            "offset gain must have {STATE_DIM} rows, got {}",
            e_c.nrows()
        )));
    }
    let VehicleParams {
        mass: m,
        yaw_inertia: jz,
        lf,
        lr,
        cf,
        cr,
        vx,
    } = *params;
    let mut a = DMatrix::zeros(4, 4);
    a[(0, 1)] = 1.0;
    a[(1, 1)] = -(cf + cr) / (m * vx);
    a[(1, 2)] = (cf + cr) / m;
    a[(1, 3)] = (lr * cr - lf * cf) / (m * vx);
    a[(2, 3)] = 1.0;
    a[(3, 1)] = (lr * cr - lf * cf) / (jz * vx);
    a[(3, 2)] = (lf * cf - lr * cr) / jz;
    a[(3, 3)] = -(lf * lf * cf + lr * lr * cr) / (jz * vx);

    let b1 = DMatrix::from_column_slice(4, 1, &[0.0, cf / m, 0.0, lf * cf / jz]);
    let b2 = DMatrix::from_column_slice(
        4,
        1,
        &[
            0.0,
            (lr * cr - lf * cf) / (m * vx) - vx,
            0.0,
            -(lf * lf * cf + lr * lr * cr) / (jz * vx),
        ],
    );
    Ok(ContinuousModel {
        params: *params,
        a,
        b1,
        b2,
        e: e_c.clone(),
    })
}

/// Forward Euler: `A = I + T_s A_c`, `B1 = T_s B1_c`, `E = T_s E_c`.
pub fn discretize(model: &ContinuousModel, ts: f64) -> Result<DiscreteModel> {
    if !(ts.is_finite() && ts > 0.0) {
        return Err(VehicleError::InvalidTs(ts));
    }
    let n = model.a.nrows();
    DiscreteModel::new(
        DMatrix::identity(n, n) + &model.a * ts,
        &model.b1 * ts,
        &model.e * ts,
        ts,
    )
}

/// Solves the 2×2 equilibrium in the unknowns `(x₃, δ)` for curvature `c`.
fn equilibrium(model: &ContinuousModel, curvature: f64) -> Result<(f64, f64)> {
    let r = curvature * model.params.vx;
    let lhs = Matrix2::new(model.a[(1, 2)], model.b1[(1, 0)], model.a[(3, 2)], model.b1[(3, 0)]);
    let rhs = Vector2::new(-model.b2[(1, 0)] * r, -model.b2[(3, 0)] * r);
    let det = lhs.determinant();
    let scale = lhs.abs().max().powi(2);
    if det.abs() <= 1e-12 * scale {
        return Err(VehicleError::SingularEquilibrium);
    }
    let sol = lhs.lu().solve(&rhs).ok_or(VehicleError::SingularEquilibrium)?;
    Ok((sol[0], sol[1]))
}

/// Steady cornering on a road of constant curvature under feedback `gain`.
///
/// The heading offset and steering angle come from the equilibrium
/// `A_c x + B1_c δ + B2_c r = 0` with `x = (0, 0, x₃, 0)`; slip angle and
/// understeer gradient are read back from them. The feed-forward term is the
/// one for which `δ_ss = −K x_ss + δ_ff`.
pub fn steady_state(model: &ContinuousModel, segment: &RoadSegment, gain: &RowDVector<f64>) -> Result<SteadyState> {
    if gain.len() != STATE_DIM {
        return Err(VehicleError::DimensionMismatch(format!(
            "gain has {} entries",
            gain.len()
        )));
    }
    let c = segment.curvature;
    if !c.is_finite() {
        return Err(VehicleError::InvalidParams {
            name: "curvature",
            value: c,
        });
    }
    let VehicleParams { lf, lr, vx, .. } = model.params;
    // Both unknowns are linear in curvature; the unit solve gives the gradients.
    let (x3_unit, delta_unit) = equilibrium(model, 1.0)?;
    let (x3, delta_ss) = equilibrium(model, c)?;
    let understeer_gradient = (delta_unit - (lf + lr)) / (vx * vx);
    let alpha_r = x3 + lr * c;
    debug_assert!((x3_unit * c - x3).abs() <= 1e-9 * (1.0 + x3.abs()));

    let mut x_ss = DVector::zeros(STATE_DIM);
    x_ss[2] = x3;
    let delta_ff = (lf + lr) * c + understeer_gradient * vx * vx * c + gain[2] * (-lr * c + alpha_r);
    Ok(SteadyState {
        x_ss,
        delta_ss,
        delta_ff,
        alpha_r,
        understeer_gradient,
    })
}

/// `‖A_c x_ss + B1_c δ_ss + B2_c r‖∞`.
pub fn equilibrium_residual(model: &ContinuousModel, segment: &RoadSegment, ss: &SteadyState) -> f64 {
    let r = segment.yaw_rate(model.params.vx);
    (&model.a * &ss.x_ss + &model.b1 * ss.delta_ss + &model.b2 * r).amax()
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct LqrSolution {
    /// `K` in `u = −K x`.
    pub gain: DMatrix<f64>,
    /// Stabilizing DARE solution.
    pub cost_to_go: DMatrix<f64>,
    pub iterations: usize,
}

/// `‖P − (AᵀPA − AᵀPB(R + BᵀPB)⁻¹BᵀPA + Q)‖∞`.
pub fn dare_residual(model: &DiscreteModel, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    match riccati_step(&model.a, &model.b1, q, r, p) {
        Some(next) => (p - next).amax(),
        None => f64::INFINITY,
    }
}

fn riccati_step(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Option<DMatrix<f64>> {
    let at_p = a.transpose() * p;
    let bt_p = b.transpose() * p;
    let s = r + &bt_p * b;
    let gain = s.lu().solve(&(&bt_p * a))?;
    let next = &at_p * a - &at_p * b * gain + q;
    Some((&next + next.transpose()) * 0.5)
}

/// Infinite-horizon discrete LQR gain by fixed-point iteration from `P₀ = Q`.
pub fn lqr_gain(model: &DiscreteModel, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<LqrSolution> {
    let n = model.n_states();
    let m = model.n_inputs();
    if q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(VehicleError::DimensionMismatch(format!(
            "Q {:?} and R {:?} for {n} states and {m} inputs",
            q.shape(),
            r.shape()
        )));
    }
    let (a, b) = (&model.a, &model.b1);
    let mut p = q.clone();
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    for k in 1..=RICCATI_MAX_ITER {
        iterations = k;
        let next = riccati_step(a, b, q, r, &p).ok_or(VehicleError::RiccatiDiverged {
            iterations: k,
            residual,
        })?;
        residual = (&next - &p).amax();
        p = next;
        if !residual.is_finite() {
            return Err(VehicleError::RiccatiDiverged {
                iterations: k,
                residual,
            });
        }
        if residual <= RICCATI_TOL {
            break;
        }
    }
    let bt_p = b.transpose() * &p;
    let gain = (r + &bt_p * b)
        .lu()
        .solve(&(&bt_p * a))
        .ok_or(VehicleError::RiccatiDiverged { iterations, residual })?;
    let rho = spectral_radius(&model.closed_loop(&gain));
    if residual > RICCATI_TOL {
        // Iterates still moving: unbounded growth means no stabilizing solution.
        return if rho >= 1.0 {
            Err(VehicleError::Unstabilizable { spectral_radius: rho })
        } else {
            Err(VehicleError::RiccatiDiverged { iterations, residual })
        };
    }
    if rho >= 1.0 {
        return Err(VehicleError::Unstabilizable { spectral_radius: rho });
    }
    Ok(LqrSolution {
        gain,
        cost_to_go: p,
        iterations,
    })
}

/// One step of the true error dynamics `A Δx + B1 Δδ + E θ + w`.
pub fn step_truth(
    model: &DiscreteModel,
    dx: &DVector<f64>,
    d_delta: &DVector<f64>,
    theta: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = model.n_states();
    if dx.len() != n || w.len() != n || d_delta.len() != model.n_inputs() || theta.len() != model.n_params() {
        return Err(VehicleError::DimensionMismatch(format!(
            "state {}, input {}, offset {}, disturbance {}",
            dx.len(),
            d_delta.len(),
            theta.len(),
            w.len()
        )));
    }
    Ok(&model.a * dx + &model.b1 * d_delta + &model.e * theta + w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    fn sedan_model() -> ContinuousModel {
        build_continuous(&VehicleParams::sedan(30.0), &DMatrix::from_element(4, 2, 1.0)).unwrap()
    }

    #[test]
    fn continuous_entries_from_direct_arithmetic() {
        let m = sedan_model();
        assert_relative_eq!(
            m.a[(1, 1)],
            -(40703.0 + 64495.0) / (1830.0 * 30.0),
            max_relative = 1e-12
        );
        assert_relative_eq!(m.a[(1, 1)], -1.91617, max_relative = 1e-5);
        assert_relative_eq!(m.b1[(1, 0)], 22.2421, max_relative = 1e-5);
        assert_relative_eq!(m.b2[(1, 0)], -28.8652, max_relative = 1e-5);
        assert_eq!(m.b1[(0, 0)], 0.0);
        assert_eq!(m.b1[(2, 0)], 0.0);
    }

    #[test]
    fn rejects_nonpositive_parameters() {
        let mut p = VehicleParams::sedan(30.0);
        p.cf = 0.0;
        let err = build_continuous(&p, &DMatrix::from_element(4, 2, 1.0)).unwrap_err();
        assert_eq!(err, VehicleError::InvalidParams { name: "cf", value: 0.0 });
    }

    #[test]
    fn euler_discretization() {
        let m = sedan_model();
        let d = discretize(&m, 0.1).unwrap();
        assert_relative_eq!(d.a[(0, 1)], 0.1, max_relative = 1e-15);
        assert_relative_eq!(d.a[(1, 1)], 0.808383, max_relative = 1e-5);
        assert_relative_eq!(d.e[(2, 1)], 0.1, max_relative = 1e-15);
        let back = (&d.a - DMatrix::identity(4, 4)) / 0.1;
        assert_relative_eq!(back, m.a, max_relative = 1e-12);
        assert_eq!(discretize(&m, 0.0).unwrap_err(), VehicleError::InvalidTs(0.0));
        assert_eq!(discretize(&m, -0.1).unwrap_err(), VehicleError::InvalidTs(-0.1));
    }

    #[test]
    fn straight_road_has_trivial_steady_state() {
        let m = sedan_model();
        let k = RowDVector::from_vec(vec![0.3, 0.2, 3.6, 0.6]);
        let ss = steady_state(
            &m,
            &RoadSegment {
                curvature: 0.0,
                length: 1.0,
            },
            &k,
        )
        .unwrap();
        assert_eq!(ss.x_ss, DVector::zeros(4));
        assert_eq!(ss.delta_ss, 0.0);
        assert_eq!(ss.delta_ff, 0.0);
    }

    #[test]
    fn curved_road_steady_state_matches_closed_forms() {
        let m = sedan_model();
        let p = m.params;
        let k = RowDVector::from_vec(vec![0.3, 0.2, 3.6, 0.6]);
        let c = 0.001;
        let seg = RoadSegment {
            curvature: c,
            length: 1.0,
        };
        let ss = steady_state(&m, &seg, &k).unwrap();
        // Textbook per-axle understeer gradient and rear slip for this model.
        let kv = p.mass * (p.lr * p.cr - p.lf * p.cf) / ((p.lf + p.lr) * p.cf * p.cr);
        assert_relative_eq!(ss.understeer_gradient, kv, max_relative = 1e-9);
        assert_relative_eq!(
            ss.delta_ss,
            (p.lf + p.lr) * c + kv * p.vx * p.vx * c,
            max_relative = 1e-9
        );
        let alpha_r = p.mass * p.lf * p.vx * p.vx * c / ((p.lf + p.lr) * p.cr);
        assert_relative_eq!(ss.alpha_r, alpha_r, max_relative = 1e-9);
        assert!(equilibrium_residual(&m, &seg, &ss) <= 1e-9);
        assert!((ss.delta_ss - (-(&k * &ss.x_ss)[0] + ss.delta_ff)).abs() <= 1e-7);
    }

    #[test]
    fn steady_state_is_odd_in_curvature() {
        let m = sedan_model();
        let k = RowDVector::from_vec(vec![0.3, 0.2, 3.6, 0.6]);
        let a = steady_state(
            &m,
            &RoadSegment {
                curvature: 0.004,
                length: 1.0,
            },
            &k,
        )
        .unwrap();
        let b = steady_state(
            &m,
            &RoadSegment {
                curvature: -0.004,
                length: 1.0,
            },
            &k,
        )
        .unwrap();
        assert_relative_eq!(a.x_ss, -b.x_ss, max_relative = 1e-12);
        assert_relative_eq!(a.delta_ss, -b.delta_ss, max_relative = 1e-12);
        assert_relative_eq!(a.delta_ff, -b.delta_ff, max_relative = 1e-12);
    }

    #[test]
    fn scalar_lqr_golden_ratio() {
        let d = DiscreteModel::new(dmatrix![1.0], dmatrix![1.0], DMatrix::zeros(1, 0), 1.0).unwrap();
        let sol = lqr_gain(&d, &dmatrix![1.0], &dmatrix![1.0]).unwrap();
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((sol.cost_to_go[(0, 0)] - phi).abs() <= 1e-9);
        assert!((sol.gain[(0, 0)] - (phi - 1.0)).abs() <= 1e-9);
    }

    #[test]
    fn zero_weight_on_stable_plant_gives_zero_gain() {
        let d = DiscreteModel::new(dmatrix![0.5], dmatrix![1.0], DMatrix::zeros(1, 0), 1.0).unwrap();
        let sol = lqr_gain(&d, &dmatrix![0.0], &dmatrix![1.0]).unwrap();
        assert_eq!(sol.gain[(0, 0)], 0.0);
        assert_eq!(sol.cost_to_go[(0, 0)], 0.0);
    }

    #[test]
    fn unstabilizable_plant_is_reported() {
        let d = DiscreteModel::new(
            dmatrix![2.0, 0.0; 0.0, 0.5],
            dmatrix![0.0; 1.0],
            DMatrix::zeros(2, 0),
            1.0,
        )
        .unwrap();
        let err = lqr_gain(&d, &DMatrix::identity(2, 2), &dmatrix![1.0]).unwrap_err();
        assert!(matches!(
            err,
            VehicleError::RiccatiDiverged { .. } | VehicleError::Unstabilizable { .. }
        ));
    }

    #[test]
    fn sedan_lqr_stabilizes() {
        let d = discretize(&sedan_model(), 0.1).unwrap();
        let q = DMatrix::identity(4, 4) * 2.0;
        let r = dmatrix![1.0];
        let sol = lqr_gain(&d, &q, &r).unwrap();
        assert!(spectral_radius(&d.closed_loop(&sol.gain)) < 1.0);
        assert!(dare_residual(&d, &q, &r, &sol.cost_to_go) <= 1e-8);
    }

    #[test]
    fn truth_step_is_affine() {
        let d = discretize(&sedan_model(), 0.1).unwrap();
        let zero4 = DVector::zeros(4);
        let zero1 = DVector::zeros(1);
        let theta = dvector![-0.17, 0.26];
        assert_eq!(
            step_truth(&d, &zero4, &zero1, &DVector::zeros(2), &zero4).unwrap(),
            zero4
        );
        let drift = step_truth(&d, &zero4, &zero1, &theta, &zero4).unwrap();
        for v in drift.iter() {
            assert_relative_eq!(*v, 0.009, max_relative = 1e-12);
        }
        let dx = dvector![0.5, -0.1, 0.02, 0.3];
        let u = dvector![0.05];
        let w = dvector![0.01, -0.02, 0.0, 0.03];
        let whole = step_truth(&d, &dx, &u, &theta, &w).unwrap();
        let parts = step_truth(&d, &dx, &u, &DVector::zeros(2), &zero4).unwrap()
            + step_truth(&d, &zero4, &zero1, &theta, &w).unwrap();
        assert_relative_eq!(whole, parts, max_relative = 1e-12);
        assert!(step_truth(&d, &dvector![1.0], &u, &theta, &w).is_err());
    }
}
