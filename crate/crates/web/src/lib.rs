//! WebAssembly entry points for the browser demo.
//!
//! Each exported function takes a JSON settings object and returns JSON with
//! SVG markup ready to insert into the page. The `*_json` functions hold the
//! logic so native tests can call them without a JavaScript host.

use lanekeep_core::harness::{
    self, input_svg, polygons_svg, states_svg, theta_snapshots, theta_svg, ControllerKind, Plant, RunSummary, Scenario,
    SimTrace,
};
use lanekeep_core::polytope::Polytope;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

/// Settings shared by all operations; missing fields take the defaults below.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub controllers: Vec<ControllerKind>,
    pub seed: u64,
    pub steps: usize,
    pub theta_true: [f64; 2],
    pub w_radius: f64,
    pub curvature: f64,
    pub initial_ecg: f64,
    /// Steps between drawn parameter-set snapshots.
    pub snapshot_every: usize,
    /// State coordinates spanning the terminal-set slice.
    pub axes: [usize; 2],
}

impl Default for Settings {
    fn default() -> Self {
        let s = Scenario::default();
        Self {
            controllers: vec![ControllerKind::Adaptive, ControllerKind::Nominal],
            seed: 0,
            steps: 120,
            theta_true: [s.theta_true[0], s.theta_true[1]],
            w_radius: s.w_radius,
            curvature: s.road[0].curvature,
            initial_ecg: s.initial_error[0],
            snapshot_every: 10,
            axes: [0, 2],
        }
    }
}

impl Settings {
    fn scenario(&self, controller: ControllerKind) -> Scenario {
        let mut s = Scenario {
            name: "web".into(),
            seed: self.seed,
            steps: self.steps,
            theta_true: self.theta_true.to_vec(),
            w_radius: self.w_radius,
            controller,
            ..Scenario::default()
        };
        s.road[0].curvature = self.curvature;
        s.initial_error[0] = self.initial_ecg;
        s
    }
}

const STATE_NAMES: [&str; 4] = ["Δe_cg [m]", "Δė_cg [m/s]", "Δδψ [rad]", "Δδψ̇ [rad/s]"];

#[derive(Serialize)]
struct ClosedLoop {
    states_svg: String,
    input_svg: String,
    summaries: Vec<RunSummary>,
    failures: Vec<Option<String>>,
}

#[derive(Serialize)]
struct ParameterSets {
    svg: String,
    final_rows: usize,
    final_volume: Option<f64>,
}

#[derive(Serialize)]
struct TerminalSlice {
    svg: String,
    prior_rows: usize,
    learned_rows: usize,
    prior_area: f64,
    learned_area: f64,
}

fn polygon_area(v: &[[f64; 2]]) -> f64 {
    let n = v.len();
    (0..n)
        .map(|k| v[k][0] * v[(k + 1) % n][1] - v[(k + 1) % n][0] * v[k][1])
        .sum::<f64>()
        .abs()
        / 2.0
}

fn parse(settings: &str) -> Result<Settings, String> {
    if settings.trim().is_empty() {
        return Ok(Settings::default());
    }
    serde_json::from_str(settings).map_err(|e| format!("bad settings: {e}"))
}

fn to_json(v: &impl Serialize) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

/// Overlaid state and input traces for each requested controller.
pub fn closed_loop_json(settings: &str) -> Result<String, String> {
    let cfg = parse(settings)?;
    if cfg.controllers.is_empty() {
        return Err("no controller selected".into());
    }
    let mut traces: Vec<SimTrace> = Vec::new();
    let mut summaries = Vec::new();
    let mut failures = Vec::new();
    let base = cfg.scenario(ControllerKind::Adaptive);
    for &kind in &cfg.controllers {
        let out = harness::run(&cfg.scenario(kind)).map_err(|e| e.to_string())?;
        summaries.push(out.summary);
        failures.push(out.failure.map(|f| format!("step {}: {}", f.step, f.reason)));
        traces.push(out.trace);
    }
    let refs: Vec<&SimTrace> = traces.iter().collect();
    to_json(&ClosedLoop {
        states_svg: states_svg(&refs, base.ecg_max, base.dpsi_max).map_err(|e| e.to_string())?,
        input_svg: input_svg(&refs, base.ddelta_max).map_err(|e| e.to_string())?,
        summaries,
        failures,
    })
}

/// Snapshots of the feasible parameter set during an adaptive run.
pub fn parameter_sets_json(settings: &str) -> Result<String, String> {
    let cfg = parse(settings)?;
    let out = harness::run(&cfg.scenario(ControllerKind::Adaptive)).map_err(|e| e.to_string())?;
    let snaps = theta_snapshots(&out.trace, cfg.snapshot_every);
    let svg = theta_svg(&snaps, Some(&cfg.theta_true)).map_err(|e| e.to_string())?;
    let last = snaps.last().map(|(_, p)| p);
    to_json(&ParameterSets {
        svg,
        final_rows: last.map_or(0, Polytope::n_rows),
        final_volume: out.summary.final_theta_volume,
    })
}

/// Terminal set sliced through the origin, for the prior parameter set and for the true offset alone.
pub fn terminal_slice_json(settings: &str) -> Result<String, String> {
    let cfg = parse(settings)?;
    let [i, j] = cfg.axes;
    if i == j || i >= 4 || j >= 4 {
        return Err(format!(
            "axes must be two distinct coordinates in 0..4, got {:?}",
            cfg.axes
        ));
    }
    let scenario = cfg.scenario(ControllerKind::Adaptive);
    let plant = Plant::new(&scenario).map_err(|e| e.to_string())?;
    let prior = Polytope::from_box(&scenario.theta0_lower, &scenario.theta0_upper).map_err(|e| e.to_string())?;
    let learned = Polytope::point(&cfg.theta_true).map_err(|e| e.to_string())?;
    let origin = DVector::zeros(4);
    let mut polys = Vec::new();
    let mut rows = [0usize; 2];
    for (k, (label, theta)) in [("prior parameter set", &prior), ("offset known", &learned)]
        .into_iter()
        .enumerate()
    {
        let terminal = plant.terminal_set(theta).map_err(|e| format!("{label}: {e}"))?;
        rows[k] = terminal.n_rows();
        let cut = terminal.slice(&[i, j], &origin).map_err(|e| e.to_string())?;
        polys.push((
            label.to_string(),
            cut.vertices_2d().map_err(|e| format!("{label}: {e}"))?,
        ));
    }
    let title = format!("terminal set slice ({}, {})", STATE_NAMES[i], STATE_NAMES[j]);
    let svg = polygons_svg(
        &title,
        (STATE_NAMES[i], STATE_NAMES[j]),
        &polys,
        Some(("origin", [0.0, 0.0])),
    );
    to_json(&TerminalSlice {
        svg,
        prior_rows: rows[0],
        learned_rows: rows[1],
        prior_area: polygon_area(&polys[0].1),
        learned_area: polygon_area(&polys[1].1),
    })
}

#[wasm_bindgen]
pub fn closed_loop(settings: &str) -> Result<String, JsError> {
    closed_loop_json(settings).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn parameter_sets(settings: &str) -> Result<String, JsError> {
    parameter_sets_json(settings).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn terminal_slice(settings: &str) -> Result<String, JsError> {
    terminal_slice_json(settings).map_err(|e| JsError::new(&e))
}
