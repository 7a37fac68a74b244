//! Closed-loop lane-keeping simulation: road segments, disturbance sampling,
//! the adaptive and nominal robust MPC loops, the LQR baseline, and outputs.

mod plot;
mod scenario;
mod trace;

use std::path::Path;

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::controller::{
    self, build_stacked, closed_loop_input, terminal_set, ConstraintSet, ControllerConfig, ControllerError, MpcStatus,
};
use crate::estimator::{EstimatorError, FeasibleParameterSet, Measurement};
use crate::polytope::{Polytope, PolytopeError};
use crate::vehicle::{self, ContinuousModel, DiscreteModel, SteadyState, VehicleError};

pub use plot::{emit_plots, input_svg, polygons_svg, states_svg, theta_snapshots, theta_svg, PlotFiles, Series};
pub use scenario::{ControllerKind, OffsetChange, Scenario, DEFAULT_W_RADIUS};
pub use trace::{read_csv, write_csv, CsvRow, RunSummary, SimTrace, StepEvent, TraceStatus, TraceStep, CSV_COLUMNS};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("scenario error: {0}")]
    Config(String),
    #[error(transparent)]
    Vehicle(#[from] VehicleError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
    #[error("trace is empty")]
    EmptyTrace,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Everything derived once from a scenario before the loop starts.
#[derive(Debug, Clone)]
pub struct Plant {
    pub continuous: ContinuousModel,
    pub model: DiscreteModel,
    pub gain: DMatrix<f64>,
    pub constraints: ConstraintSet,
    pub config: ControllerConfig,
    pub disturbance: Polytope,
    pub theta0: Polytope,
}

impl Plant {
    pub fn new(s: &Scenario) -> Result<Self> {
        s.validate()?;
        let p = s.n_params();
        let e = DMatrix::from_fn(4, p, |i, j| s.offset_gain[i][j]);
        let e_c = if s.offset_gain_is_discrete { e / s.ts } else { e };
        let continuous = vehicle::build_continuous(&s.vehicle, &e_c)?;
        let model = vehicle::discretize(&continuous, s.ts)?;
        let q = DMatrix::from_diagonal(&DVector::from_vec(s.q_diag.clone()));
        let r = DMatrix::from_element(1, 1, s.r);
        let gain = vehicle::lqr_gain(&model, &q, &r)?.gain;
        let config = ControllerConfig {
            horizon: s.horizon,
            q,
            r,
            cost_mode: s.cost_mode,
            rho: s.rho,
            terminal_max_iter: s.terminal_max_iter,
            terminal_recompute_every: s.terminal_recompute_every,
            theta_constant_over_horizon: s.theta_constant_over_horizon,
        };
        config.validate(4, 1)?;
        Ok(Self {
            continuous,
            model,
            gain,
            constraints: ConstraintSet::lane_keeping(s.ecg_max, s.dpsi_max, s.ddelta_max),
            config,
            disturbance: Polytope::hypercube(4, s.w_radius)?,
            theta0: Polytope::from_box(&s.theta0_lower, &s.theta0_upper)?,
        })
    }

    pub fn gain_row(&self) -> RowDVector<f64> {
        RowDVector::from_row_slice(self.gain.as_slice())
    }

    /// Terminal set for parameter set `theta`.
    pub fn terminal_set(&self, theta: &Polytope) -> Result<Polytope> {
        Ok(terminal_set(
            &self.model,
            &self.gain,
            &self.constraints,
            &self.disturbance,
            theta,
            self.config.terminal_max_iter,
        )?)
    }

    /// Stacked problem tightened against `theta` with the given terminal set.
    pub fn tightened_problem(&self, theta: &Polytope, terminal: &Polytope) -> Result<controller::StackedMpcProblem> {
        let p = build_stacked(
            &self.model,
            &self.gain,
            &self.constraints,
            terminal,
            self.config.horizon,
        )?;
        Ok(p.tighten(&self.disturbance, theta, self.config.coupling())?)
    }

    /// Positive part of each `±` constraint pair: `|Δe_cg|`, `|Δδψ|`, `|Δδ|`.
    pub fn violations(&self, dx: &DVector<f64>, d_delta: f64) -> [f64; 3] {
        let r = self.constraints.residuals(dx, &DVector::from_element(1, d_delta));
        [0, 1, 2].map(|k| {
            let v = r[2 * k].max(r[2 * k + 1]);
            if v > VIOLATION_TOL {
                v
            } else {
                0.0
            }
        })
    }
}

/// Constraint excess treated as numerical noise rather than a violation.
pub const VIOLATION_TOL: f64 = 1e-7;

/// Road geometry with cumulative segment boundaries.
struct Road {
    segments: Vec<vehicle::RoadSegment>,
    ends: Vec<f64>,
}

impl Road {
    fn new(segments: &[vehicle::RoadSegment]) -> Self {
        let mut ends = Vec::with_capacity(segments.len());
        let mut acc = 0.0;
        for s in segments {
            acc += s.length;
            ends.push(acc);
        }
        Self {
            segments: segments.to_vec(),
            ends,
        }
    }

    fn index_at(&self, s: f64) -> usize {
        self.ends.iter().position(|&e| s < e).unwrap_or(self.segments.len() - 1)
    }
}

/// Why a run stopped early.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub step: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: SimTrace,
    pub summary: RunSummary,
    pub failure: Option<RunFailure>,
}

fn now() -> Option<std::time::Instant> {
    #[cfg(not(target_arch = "wasm32"))]
    {
        Some(std::time::Instant::now())
    }
    #[cfg(target_arch = "wasm32")]
    {
        None
    }
}

fn elapsed_ms(start: Option<std::time::Instant>) -> f64 {
    start.map_or(0.0, |s| s.elapsed().as_secs_f64() * 1e3)
}

/// Runs the scenario with the controller it names.
pub fn run(scenario: &Scenario) -> Result<RunOutput> {
    let plant = Plant::new(scenario)?;
    simulate(scenario, &plant, scenario.controller)
}

/// Runs the scenario with the LQR law `δ = δ_ss − KΔx` regardless of its controller field.
pub fn run_lqr_baseline(scenario: &Scenario) -> Result<RunOutput> {
    let plant = Plant::new(scenario)?;
    simulate(scenario, &plant, ControllerKind::Lqr)
}

/// Runs several scenarios, in parallel when the `parallel` feature is on.
pub fn run_batch(scenarios: &[Scenario]) -> Vec<Result<RunOutput>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        scenarios.par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        scenarios.iter().map(run).collect()
    }
}

struct MpcState {
    fps: Option<FeasibleParameterSet>,
    terminal: Option<(Polytope, usize)>,
}

pub fn simulate(scenario: &Scenario, plant: &Plant, kind: ControllerKind) -> Result<RunOutput> {
    let ts = scenario.ts;
    let vx = scenario.vehicle.vx;
    let n = scenario.horizon;
    let road = Road::new(&scenario.road);
    let gain_row = plant.gain_row();
    let steady: Vec<SteadyState> = road
        .segments
        .iter()
        .map(|seg| vehicle::steady_state(&plant.continuous, seg, &gain_row))
        .collect::<std::result::Result<_, _>>()?;
    let b2 = &plant.continuous.b2 * ts;
    let noise = Uniform::new_inclusive(-scenario.w_radius, scenario.w_radius);
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);

    let mut state = MpcState {
        fps: match kind {
            ControllerKind::Adaptive => Some(FeasibleParameterSet::init(&plant.theta0)?),
            _ => None,
        },
        terminal: None,
    };
    let nominal_theta = Polytope::point(&scenario.nominal_theta)?;

    let mut x = &steady[0].x_ss + DVector::from_vec(scenario.initial_error.clone());
    let mut prev: Option<(DVector<f64>, f64, usize, usize)> = None;
    let mut soft_until = 0usize;
    let mut steps = Vec::with_capacity(scenario.steps + 1);
    let mut failure = None;

    for t in 0..=scenario.steps {
        let s_pos = t as f64 * vx * ts;
        let true_seg = road.index_at(s_pos);
        let seen_seg = road.index_at(t.saturating_sub(scenario.detection_delay) as f64 * vx * ts);
        let theta_a = match &scenario.offset_change {
            Some(c) if t >= c.step => c.theta.clone(),
            _ => scenario.theta_true.clone(),
        };
        let ss = &steady[seen_seg];
        let dx = &x - &ss.x_ss;
        let mut events = Vec::new();

        let mut consistent_transition = false;
        if let Some((_, _, prev_true, prev_seen)) = &prev {
            if *prev_seen != seen_seg {
                events.push(StepEvent::SegmentSwitch);
                soft_until = t + n;
            }
            consistent_transition = *prev_true == true_seg && *prev_seen == seen_seg && true_seg == seen_seg;
        }

        // Parameter set update from the last transition.
        if let (Some(fps), Some((pdx, pdd, _, _)), true) = (&state.fps, &prev, consistent_transition) {
            let m = Measurement {
                prev_state: pdx.clone(),
                prev_input: DVector::from_element(1, *pdd),
                next_state: dx.clone(),
            };
            match fps.update(&m, &plant.model, &plant.disturbance) {
                Ok(next) => state.fps = Some(next),
                Err(EstimatorError::InconsistentData { t: at }) if scenario.auto_reset => {
                    log::info!("parameter set emptied at step {t} (estimator step {at}); resetting to the prior");
                    let fresh = fps.reset(&plant.theta0)?;
                    state.fps = Some(fresh.update(&m, &plant.model, &plant.disturbance).unwrap_or(fresh));
                    state.terminal = None;
                    soft_until = t + n;
                    events.push(StepEvent::EstimatorReset);
                }
                Err(EstimatorError::InconsistentData { .. }) => {
                    failure = Some(RunFailure {
                        step: t,
                        reason: "measurement contradicts the parameter set".into(),
                    });
                    break;
                }
                Err(e) => return Err(e.into()),
            }
        }

        let theta_now = state.fps.as_ref().map(|f| f.theta_set().clone());
        let start = now();
        let (d_delta, v_star, status, slack, terminal_rows) = match kind {
            ControllerKind::Lqr => ((-(&plant.gain * &dx))[0], 0.0, TraceStatus::Unconstrained, 0.0, 0),
            ControllerKind::Adaptive | ControllerKind::Nominal => {
                let theta_ctrl = theta_now.clone().unwrap_or_else(|| nominal_theta.clone());
                let stale = match &state.terminal {
                    None => true,
                    Some((_, at)) => t - at >= scenario.terminal_recompute_every,
                };
                if stale {
                    match plant.terminal_set(&theta_ctrl) {
                        Ok(set) => state.terminal = Some((set, t)),
                        Err(e) => {
                            failure = Some(RunFailure {
                                step: t,
                                reason: format!("terminal set: {e}"),
                            });
                            break;
                        }
                    }
                }
                let terminal = &state.terminal.as_ref().expect("terminal set computed above").0;
                let problem = plant.tightened_problem(&theta_ctrl, terminal)?;
                let soft = t < soft_until;
                // A hard-infeasible step falls back to the softened problem and is recorded as such.
                let (sol, hard_infeasible) = match controller::solve(&problem, &dx, &plant.config, soft) {
                    Err(ControllerError::Infeasible) if !soft => {
                        log::warn!("hard MPC problem infeasible at step {t}; applying the softened solution");
                        (controller::solve(&problem, &dx, &plant.config, true), true)
                    }
                    other => (other, false),
                };
                match sol {
                    Ok(sol) => {
                        let cmd = closed_loop_input(&sol, &plant.gain, &dx, &DVector::from_element(1, ss.delta_ss));
                        let status = match sol.status {
                            _ if hard_infeasible => TraceStatus::Infeasible,
                            MpcStatus::Feasible => TraceStatus::Feasible,
                            _ => TraceStatus::SoftenedFeasible,
                        };
                        (
                            cmd.d_delta[0],
                            sol.first_input()[0],
                            status,
                            sol.slack_sum(),
                            terminal.n_rows(),
                        )
                    }
                    Err(ControllerError::Infeasible) => {
                        failure = Some(RunFailure {
                            step: t,
                            reason: "softened MPC problem infeasible".into(),
                        });
                        steps.push(TraceStep::failed(
                            t,
                            ts,
                            s_pos,
                            road.segments[true_seg].curvature,
                            &x,
                            &dx,
                            theta_now,
                        ));
                        break;
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        };
        let solve_ms = elapsed_ms(start);
        let delta = ss.delta_ss + d_delta;

        let truth = &steady[true_seg];
        let violations = plant.violations(&(&x - &truth.x_ss), delta - truth.delta_ss);
        let w = if t < scenario.steps {
            DVector::from_fn(4, |_, _| noise.sample(&mut rng))
        } else {
            DVector::zeros(4)
        };
        steps.push(TraceStep {
            step: t,
            t: t as f64 * ts,
            s: s_pos,
            curvature: road.segments[true_seg].curvature,
            x: x.clone(),
            dx: dx.clone(),
            delta,
            d_delta,
            v_star,
            status,
            slack,
            theta: theta_now,
            terminal_rows,
            violations,
            w: w.clone(),
            solve_ms,
            events,
        });
        if t == scenario.steps {
            break;
        }

        let r = road.segments[true_seg].yaw_rate(vx);
        let theta_vec = DVector::from_vec(theta_a);
        x = &plant.model.a * &x + &plant.model.b1 * delta + &b2 * r + &plant.model.e * &theta_vec + &w;
        prev = Some((dx, d_delta, true_seg, seen_seg));
    }

    let trace = SimTrace {
        scenario: scenario.name.clone(),
        controller: kind,
        steps,
    };
    let summary = RunSummary::from_trace(&trace, failure.is_some());
    Ok(RunOutput {
        trace,
        summary,
        failure,
    })
}

/// Writes `trace.csv`, `theta.jsonl`, `summary.json` and, optionally, plots into `dir`.
pub fn write_outputs(out: &RunOutput, dir: &Path, prefix: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_csv(&out.trace, &dir.join(format!("{prefix}trace.csv")))?;
    trace::write_theta_rows(&out.trace, &dir.join(format!("{prefix}theta.jsonl")))?;
    let mut summary = serde_json::to_value(&out.summary)?;
    if let Some(f) = &out.failure {
        summary["failure"] = serde_json::json!({ "step": f.step, "reason": f.reason });
    }
    std::fs::write(
        dir.join(format!("{prefix}summary.json")),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vehicle::RoadSegment;

    fn quiet() -> Scenario {
        Scenario {
            steps: 30,
            w_radius: 0.0,
            theta_true: vec![0.0, 0.0],
            initial_error: vec![0.0; 4],
            road: vec![RoadSegment {
                curvature: 0.0,
                length: 1e9,
            }],
            ..Scenario::default()
        }
    }

    #[test]
    fn equilibrium_stays_at_rest() {
        for kind in [ControllerKind::Adaptive, ControllerKind::Nominal, ControllerKind::Lqr] {
            let s = Scenario {
                controller: kind,
                ..quiet()
            };
            let out = run(&s).unwrap();
            assert!(out.failure.is_none());
            assert_eq!(out.trace.steps.len(), 31);
            for st in &out.trace.steps {
                assert!(
                    st.x.amax() <= 1e-12 && st.d_delta.abs() <= 1e-9,
                    "{kind:?} step {}",
                    st.step
                );
                assert!(st.violations.iter().all(|v| *v == 0.0));
            }
            if kind == ControllerKind::Adaptive {
                let last = out.trace.steps.last().unwrap().theta.clone().unwrap();
                let prior = Polytope::from_box(&s.theta0_lower, &s.theta0_upper).unwrap();
                // Without disturbance the data pin the identifiable sum θ1 + θ2 to zero.
                assert!(prior.contains_set(&last, 1e-9).unwrap());
                assert!(last.contains_point(&DVector::zeros(2), 1e-9).unwrap());
                let sum = DVector::from_vec(vec![1.0, 1.0]);
                let width = last.support(&sum).unwrap() + last.support(&-&sum).unwrap();
                assert!(width <= 1e-7, "width {width}");
            }
        }
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let s = Scenario {
            steps: 40,
            initial_error: vec![1.0, 0.0, 0.0, 0.0],
            ..Scenario::default()
        };
        let a = run(&s).unwrap();
        let b = run(&s).unwrap();
        assert_eq!(a.trace.to_rows(), b.trace.to_rows());
        let other = run(&Scenario { seed: 1, ..s.clone() }).unwrap();
        assert_ne!(a.trace.to_rows(), other.trace.to_rows());
    }

    #[test]
    fn lqr_baseline_converges_without_uncertainty() {
        let s = Scenario {
            controller: ControllerKind::Lqr,
            initial_error: vec![0.5, 0.0, 0.05, 0.0],
            steps: 150,
            ..quiet()
        };
        let out = run_lqr_baseline(&s).unwrap();
        assert!(out.trace.steps.last().unwrap().dx.amax() < 1e-3);
        assert_eq!(out.summary.violation_steps, 0);
    }

    #[test]
    fn segment_switch_softens_and_resets_error() {
        let s = Scenario {
            steps: 40,
            road: vec![
                RoadSegment {
                    curvature: 0.001,
                    length: 45.0,
                },
                RoadSegment {
                    curvature: -0.001,
                    length: 1e9,
                },
            ],
            ..Scenario::default()
        };
        let out = run(&s).unwrap();
        assert!(out.failure.is_none(), "{:?}", out.failure);
        let switch = out
            .trace
            .steps
            .iter()
            .position(|st| st.events.contains(&StepEvent::SegmentSwitch))
            .unwrap();
        assert_eq!(switch, 15);
        assert!(out.trace.steps[switch].curvature < 0.0);
    }

    #[test]
    fn hard_infeasibility_falls_back_to_the_softened_problem() {
        let s = Scenario {
            steps: 20,
            initial_error: vec![3.8, 0.0, 0.6, 0.0],
            ..Scenario::default()
        };
        let out = run(&s).unwrap();
        assert!(out.failure.is_none());
        assert_eq!(out.trace.steps.len(), 21);
        assert_eq!(out.trace.steps[0].status, TraceStatus::Infeasible);
        assert!(out.trace.steps[0].slack > 0.0);
        assert!(out.summary.infeasible_steps >= 1);
    }
}
