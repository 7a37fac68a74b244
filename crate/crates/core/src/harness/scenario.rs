//! Scenario files: every knob of a closed-loop run in one TOML document.

use serde::{Deserialize, Serialize};

use crate::controller::CostMode;
use crate::vehicle::{RoadSegment, VehicleParams};

use super::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    /// Tightens against the feasible parameter set, updated online.
    Adaptive,
    /// Tightens against the disturbance set only, with a fixed offset guess.
    Nominal,
    /// Steady-state feed-forward plus fixed state feedback, no constraints.
    Lqr,
}

impl std::str::FromStr for ControllerKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Self::Adaptive),
            "nominal" | "nominal_robust" => Ok(Self::Nominal),
            "lqr" => Ok(Self::Lqr),
            other => Err(HarnessError::Config(format!("unknown controller kind '{other}'"))),
        }
    }
}

/// A change of the true offset partway through the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffsetChange {
    /// First step simulated with the new offset.
    pub step: usize,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    /// Number of simulated transitions; the trace holds one more sample.
    pub steps: usize,
    pub ts: f64,
    pub horizon: usize,
    pub q_diag: Vec<f64>,
    pub r: f64,
    pub cost_mode: CostMode,
    pub rho: f64,
    /// Bound on `|Δe_cg|`, m.
    pub ecg_max: f64,
    /// Bound on `|Δδψ|`, rad.
    pub dpsi_max: f64,
    /// Bound on `|Δδ|`, rad.
    pub ddelta_max: f64,
    /// ∞-norm radius of the additive disturbance set.
    pub w_radius: f64,
    pub theta0_lower: Vec<f64>,
    pub theta0_upper: Vec<f64>,
    /// True offset at the start of the run.
    pub theta_true: Vec<f64>,
    pub offset_change: Option<OffsetChange>,
    /// Rows of the offset gain, 4 × p.
    pub offset_gain: Vec<Vec<f64>>,
    /// When false the offset gain is continuous-time and gets multiplied by `ts`.
    pub offset_gain_is_discrete: bool,
    /// Error state at `t = 0`, relative to the first segment's steady state.
    pub initial_error: Vec<f64>,
    pub controller: ControllerKind,
    /// Offset assumed by the nominal controller.
    pub nominal_theta: Vec<f64>,
    pub terminal_max_iter: usize,
    pub terminal_recompute_every: usize,
    pub theta_constant_over_horizon: bool,
    /// Steps between entering a segment and the controller using its curvature.
    pub detection_delay: usize,
    /// Reset the parameter set to its prior when data contradicts it.
    pub auto_reset: bool,
    pub vehicle: VehicleParams,
    /// Segments in driving order; the last one extends to the end of the run.
    pub road: Vec<RoadSegment>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "lane_keeping".into(),
            seed: 0,
            steps: 200,
            ts: 0.1,
            horizon: 6,
            q_diag: vec![2.0; 4],
            r: 1.0,
            cost_mode: CostMode::OneNorm,
            rho: 1e4,
            ecg_max: 4.0,
            dpsi_max: 0.7,
            ddelta_max: std::f64::consts::FRAC_PI_3,
            w_radius: DEFAULT_W_RADIUS,
            theta0_lower: vec![-0.2, -0.3],
            theta0_upper: vec![0.2, 0.3],
            theta_true: vec![-0.17, 0.26],
            offset_change: None,
            offset_gain: vec![vec![1.0, 1.0]; 4],
            offset_gain_is_discrete: false,
            initial_error: vec![3.0, 0.0, 0.2, 0.0],
            controller: ControllerKind::Adaptive,
            nominal_theta: vec![0.0, 0.0],
            terminal_max_iter: 200,
            terminal_recompute_every: 1,
            theta_constant_over_horizon: false,
            detection_delay: 0,
            auto_reset: true,
            vehicle: VehicleParams::sedan(30.0),
            road: vec![RoadSegment {
                curvature: 0.001,
                length: 1e9,
            }],
        }
    }
}

/// Disturbance radius of the built-in scenarios.
///
/// Radius 0.5 leaves no robust invariant set inside the lane-keeping bounds
/// for this vehicle. At 0.01 the per-step offset effect is comparable to the
/// disturbance bound.
pub const DEFAULT_W_RADIUS: f64 = 0.01;

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn n_params(&self) -> usize {
        self.theta0_lower.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        let p = self.n_params();
        if p == 0 || self.theta0_upper.len() != p {
            return bad(format!(
                "theta0 bounds have lengths {} and {}",
                self.theta0_lower.len(),
                self.theta0_upper.len()
            ));
        }
        if self.theta0_lower.iter().zip(&self.theta0_upper).any(|(l, u)| !(l <= u)) {
            return bad("theta0_lower must not exceed theta0_upper".into());
        }
        for (name, v) in [("theta_true", &self.theta_true), ("nominal_theta", &self.nominal_theta)] {
            if v.len() != p {
                return bad(format!("{name} has length {}, expected {p}", v.len()));
            }
        }
        if let Some(c) = &self.offset_change {
            if c.theta.len() != p {
                return bad(format!(
                    "offset_change.theta has length {}, expected {p}",
                    c.theta.len()
                ));
            }
        }
        if self.offset_gain.len() != 4 || self.offset_gain.iter().any(|r| r.len() != p) {
            return bad(format!("offset_gain must be 4 rows of {p} entries"));
        }
        if self.initial_error.len() != 4 || self.q_diag.len() != 4 {
            return bad("initial_error and q_diag need 4 entries".into());
        }
        if !(self.ts > 0.0 && self.ts.is_finite()) {
            return bad(format!("ts must be positive, got {}", self.ts));
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if !(self.w_radius >= 0.0 && self.w_radius.is_finite()) {
            return bad(format!("w_radius must be nonnegative, got {}", self.w_radius));
        }
        if [self.ecg_max, self.dpsi_max, self.ddelta_max]
            .iter()
            .any(|b| !(*b > 0.0))
        {
            return bad("constraint bounds must be positive".into());
        }
        if self.road.is_empty() || self.road.iter().any(|s| !(s.length > 0.0) || !s.curvature.is_finite()) {
            return bad("road needs at least one segment with positive length and finite curvature".into());
        }
        if self.terminal_recompute_every == 0 {
            return bad("terminal_recompute_every must be at least 1".into());
        }
        self.vehicle.validate()?;
        let inside = self
            .theta_true
            .iter()
            .zip(self.theta0_lower.iter().zip(&self.theta0_upper))
            .all(|(t, (l, u))| l <= t && t <= u);
        if !inside {
            log::warn!("true offset lies outside the prior parameter set; robustness is not guaranteed");
        }
        Ok(())
    }
}
