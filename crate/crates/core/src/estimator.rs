//! Set-membership estimation of a constant additive offset.
//!
//! Each observed transition `(Δxₜ₋₁, Δδₜ₋₁, Δxₜ)` constrains the offset to
//! `{θ : Δxₜ − AΔxₜ₋₁ − B₁Δδₜ₋₁ − Eθ ∈ 𝕎}`; the feasible parameter set is the
//! running intersection of these slabs with the prior.

use nalgebra::DVector;
use thiserror::Error;

use crate::polytope::{Polytope, PolytopeError};
use crate::vehicle::DiscreteModel;

/// Slack added to every data halfspace so roundoff cannot empty the set.
pub const DATA_INFLATION: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("measurement is inconsistent with the feasible parameter set at t = {t}")]
    InconsistentData { t: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("prior parameter set is empty")]
    EmptySet,
    #[error("prior parameter set is unbounded")]
    Unbounded,
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
}

pub type Result<T> = std::result::Result<T, EstimatorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub prev_state: DVector<f64>,
    pub prev_input: DVector<f64>,
    pub next_state: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeasibleParameterSet {
    theta_set: Polytope,
    t: usize,
    rows_added_total: usize,
}

fn check_prior(theta0: &Polytope) -> Result<()> {
    match theta0.bounding_box() {
        Ok(_) => Ok(()),
        Err(PolytopeError::EmptySet) => Err(EstimatorError::EmptySet),
        Err(PolytopeError::UnboundedDirection) => Err(EstimatorError::Unbounded),
        Err(e) => Err(e.into()),
    }
}

impl FeasibleParameterSet {
    pub fn init(theta0: &Polytope) -> Result<Self> {
        check_prior(theta0)?;
        Ok(Self {
            theta_set: theta0.clone(),
            t: 0,
            rows_added_total: 0,
        })
    }

    pub fn theta_set(&self) -> &Polytope {
        &self.theta_set
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn rows_added_total(&self) -> usize {
        self.rows_added_total
    }

    /// The halfspaces `−H_W E θ ≤ h_W − H_W r` for residual `r`.
    pub fn data_slab(m: &Measurement, model: &DiscreteModel, w: &Polytope) -> Result<Polytope> {
        let n = model.n_states();
        if m.prev_state.len() != n || m.next_state.len() != n || m.prev_input.len() != model.n_inputs() {
            return Err(EstimatorError::DimensionMismatch(format!(
                "measurement sizes ({}, {}, {}) for a model with {n} states",
                m.prev_state.len(),
                m.prev_input.len(),
                m.next_state.len()
            )));
        }
        if w.dim() != n {
            return Err(EstimatorError::DimensionMismatch(format!(
                "disturbance set has dim {}",
                w.dim()
            )));
        }
        let residual = &m.next_state - &model.a * &m.prev_state - &model.b1 * &m.prev_input;
        let normals = -(w.normals() * &model.e);
        let offsets = w.offsets() - w.normals() * &residual + DVector::from_element(w.n_rows(), DATA_INFLATION);
        Ok(Polytope::new(normals, offsets)?)
    }

    /// Intersects the set with the slab implied by `m` and prunes redundant rows.
    pub fn update(&self, m: &Measurement, model: &DiscreteModel, w: &Polytope) -> Result<Self> {
        if model.n_params() != self.theta_set.dim() {
            return Err(EstimatorError::DimensionMismatch(format!(
                "offset gain has {} columns, parameter set has dim {}",
                model.n_params(),
                self.theta_set.dim()
            )));
        }
        let slab = Self::data_slab(m, model, w)?;
        let added = slab.n_rows();
        let merged = self.theta_set.intersect(&slab)?;
        let reduced = match merged.reduce() {
            Ok(p) => p,
            Err(PolytopeError::EmptySet) => return Err(EstimatorError::InconsistentData { t: self.t + 1 }),
            Err(e) => return Err(e.into()),
        };
        Ok(Self {
            theta_set: reduced,
            t: self.t + 1,
            rows_added_total: self.rows_added_total + added,
        })
    }

    /// Restarts from `theta0`, keeping the time index and history counter.
    pub fn reset(&self, theta0: &Polytope) -> Result<Self> {
        check_prior(theta0)?;
        Ok(Self {
            theta_set: theta0.clone(),
            t: self.t,
            rows_added_total: self.rows_added_total,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polytope::SET_TOL;
    use nalgebra::{dvector, DMatrix};

    fn model() -> DiscreteModel {
        // Identity dynamics keep the residual equal to the next state.
        DiscreteModel::new(
            DMatrix::identity(4, 4),
            DMatrix::zeros(4, 1),
            DMatrix::from_element(4, 2, 0.1),
            0.1,
        )
        .unwrap()
    }

    fn theta0() -> Polytope {
        Polytope::from_box(&[-0.2, -0.3], &[0.2, 0.3]).unwrap()
    }

    fn w() -> Polytope {
        Polytope::hypercube(4, 0.5).unwrap()
    }

    fn residual_measurement(r: DVector<f64>) -> Measurement {
        Measurement {
            prev_state: DVector::zeros(4),
            prev_input: DVector::zeros(1),
            next_state: r,
        }
    }

    #[test]
    fn init_from_box_and_singleton() {
        let fps = FeasibleParameterSet::init(&theta0()).unwrap();
        assert_eq!(fps.t(), 0);
        assert_eq!(fps.theta_set().n_rows(), 4);

        let single = Polytope::point(&[0.05, -0.1]).unwrap();
        let mut fps = FeasibleParameterSet::init(&single).unwrap();
        let truth = dvector![0.05, -0.1];
        for _ in 0..5 {
            let r = model().e.clone() * &truth;
            fps = fps.update(&residual_measurement(r), &model(), &w()).unwrap();
            assert!(fps.theta_set().set_eq(&single, SET_TOL).unwrap());
        }
    }

    #[test]
    fn init_rejects_empty_and_unbounded() {
        let empty = Polytope::from_box(&[0.1, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(
            FeasibleParameterSet::init(&empty).unwrap_err(),
            EstimatorError::EmptySet
        );
        let half = Polytope::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), dvector![1.0]).unwrap();
        assert_eq!(
            FeasibleParameterSet::init(&half).unwrap_err(),
            EstimatorError::Unbounded
        );
    }

    #[test]
    fn zero_residual_leaves_prior_unchanged() {
        let fps = FeasibleParameterSet::init(&theta0()).unwrap();
        let next = fps
            .update(&residual_measurement(DVector::zeros(4)), &model(), &w())
            .unwrap();
        assert!(next.theta_set().set_eq(&theta0(), SET_TOL).unwrap());
        assert_eq!(next.theta_set().n_rows(), 4);
        assert_eq!(next.t(), 1);
        assert_eq!(next.rows_added_total(), 8);
    }

    #[test]
    fn small_residual_leaves_prior_unchanged() {
        let fps = FeasibleParameterSet::init(&theta0()).unwrap();
        let next = fps
            .update(&residual_measurement(dvector![0.06, 0.04, 0.05, 0.05]), &model(), &w())
            .unwrap();
        assert!(next.theta_set().set_eq(&theta0(), SET_TOL).unwrap());
    }

    #[test]
    fn large_residual_cuts_the_prior() {
        let fps = FeasibleParameterSet::init(&theta0()).unwrap();
        let next = fps
            .update(&residual_measurement(dvector![0.52, 0.52, 0.52, 0.52]), &model(), &w())
            .unwrap();
        // 0.1 (θ₁ + θ₂) ≥ 0.02
        let expected = theta0()
            .intersect(&Polytope::new(DMatrix::from_row_slice(1, 2, &[-1.0, -1.0]), dvector![-0.2]).unwrap())
            .unwrap();
        assert!(next.theta_set().set_eq(&expected, 1e-7).unwrap());
        assert!(theta0().contains_set(next.theta_set(), SET_TOL).unwrap());
        assert!(!next.theta_set().contains_point(&dvector![-0.17, 0.26], 0.0).unwrap());
        assert!(next.theta_set().contains_point(&dvector![0.0, 0.25], 0.0).unwrap());
    }

    #[test]
    fn inconsistent_data_is_an_error() {
        let fps = FeasibleParameterSet::init(&theta0()).unwrap();
        let err = fps
            .update(&residual_measurement(DVector::from_element(4, 0.6)), &model(), &w())
            .unwrap_err();
        assert_eq!(err, EstimatorError::InconsistentData { t: 1 });
    }

    #[test]
    fn reset_restores_the_prior_and_keeps_counters() {
        let fps = FeasibleParameterSet::init(&theta0()).unwrap();
        let m = residual_measurement(dvector![0.52, 0.52, 0.52, 0.52]);
        let shrunk = fps.update(&m, &model(), &w()).unwrap();
        let reset = shrunk.reset(&theta0()).unwrap();
        assert!(reset.theta_set().set_eq(&theta0(), SET_TOL).unwrap());
        assert_eq!(reset.t(), 1);
        assert_eq!(reset.rows_added_total(), 8);
        let replay = reset.update(&m, &model(), &w()).unwrap();
        assert_eq!(replay.theta_set(), shrunk.theta_set());
    }

    #[test]
    fn dimension_mismatch() {
        let fps = FeasibleParameterSet::init(&theta0()).unwrap();
        let bad = Measurement {
            prev_state: DVector::zeros(3),
            prev_input: DVector::zeros(1),
            next_state: DVector::zeros(4),
        };
        assert!(matches!(
            fps.update(&bad, &model(), &w()),
            Err(EstimatorError::DimensionMismatch(_))
        ));
    }
}
