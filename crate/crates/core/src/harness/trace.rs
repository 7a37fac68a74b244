//! Per-step simulation records, run summaries and their file formats.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::polytope::{Polytope, PolytopeRows};

use super::{ControllerKind, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceStatus {
    Feasible,
    SoftenedFeasible,
    Infeasible,
    /// LQR baseline; no optimization problem.
    Unconstrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepEvent {
    /// The controller switched to a new road segment's reference.
    SegmentSwitch,
    /// The parameter set was reset to its prior after contradicting data.
    EstimatorReset,
}

/// State at step `t` and the command applied from it.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub step: usize,
    pub t: f64,
    pub s: f64,
    pub curvature: f64,
    pub x: DVector<f64>,
    pub dx: DVector<f64>,
    pub delta: f64,
    pub d_delta: f64,
    pub v_star: f64,
    pub status: TraceStatus,
    pub slack: f64,
    pub theta: Option<Polytope>,
    pub terminal_rows: usize,
    /// Violations of the `e_cg`, `δψ` and `Δδ` bounds.
    pub violations: [f64; 3],
    /// Disturbance applied on the way to the next step.
    pub w: DVector<f64>,
    pub solve_ms: f64,
    pub events: Vec<StepEvent>,
}

impl TraceStep {
    pub(super) fn failed(
        step: usize,
        ts: f64,
        s: f64,
        curvature: f64,
        x: &DVector<f64>,
        dx: &DVector<f64>,
        theta: Option<Polytope>,
    ) -> Self {
        Self {
            step,
            t: step as f64 * ts,
            s,
            curvature,
            x: x.clone(),
            dx: dx.clone(),
            delta: f64::NAN,
            d_delta: f64::NAN,
            v_star: f64::NAN,
            status: TraceStatus::Infeasible,
            slack: 0.0,
            theta,
            terminal_rows: 0,
            violations: [0.0; 3],
            w: DVector::zeros(x.len()),
            solve_ms: 0.0,
            events: Vec::new(),
        }
    }

    pub fn violated(&self) -> bool {
        self.violations.iter().any(|v| *v > 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub scenario: String,
    pub controller: ControllerKind,
    pub steps: Vec<TraceStep>,
}

impl SimTrace {
    pub fn to_rows(&self) -> Vec<CsvRow> {
        self.steps.iter().map(CsvRow::from).collect()
    }

    pub fn controller_label(&self) -> &'static str {
        match self.controller {
            ControllerKind::Adaptive => "adaptive",
            ControllerKind::Nominal => "nominal",
            ControllerKind::Lqr => "lqr",
        }
    }

    /// Steps with an [`StepEvent::EstimatorReset`].
    pub fn resets(&self) -> Vec<usize> {
        self.steps
            .iter()
            .filter(|s| s.events.contains(&StepEvent::EstimatorReset))
            .map(|s| s.step)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub controller: ControllerKind,
    pub steps: usize,
    /// Largest violation of the `e_cg`, `δψ` and `Δδ` bounds.
    pub max_violation: [f64; 3],
    pub violation_steps: usize,
    pub infeasible_steps: usize,
    pub softened_steps: usize,
    pub resets: usize,
    pub segment_switches: usize,
    /// Product of the final parameter set's axis-aligned widths.
    pub final_theta_volume: Option<f64>,
    pub mean_solve_ms: f64,
    pub max_solve_ms: f64,
}

impl RunSummary {
    pub fn from_trace(trace: &SimTrace, failed: bool) -> Self {
        let mut max_violation = [0.0f64; 3];
        for st in &trace.steps {
            for k in 0..3 {
                max_violation[k] = max_violation[k].max(st.violations[k]);
            }
        }
        let count = |f: &dyn Fn(&TraceStep) -> bool| trace.steps.iter().filter(|s| f(s)).count();
        let times: Vec<f64> = trace.steps.iter().map(|s| s.solve_ms).collect();
        let final_theta_volume = trace
            .steps
            .iter()
            .rev()
            .find_map(|s| s.theta.as_ref())
            .and_then(|p| p.box_volume().ok());
        Self {
            controller: trace.controller,
            steps: trace.steps.len(),
            max_violation,
            violation_steps: count(&|s| s.violated()),
            infeasible_steps: count(&|s| s.status == TraceStatus::Infeasible)
                + usize::from(failed && trace.steps.is_empty()),
            softened_steps: count(&|s| s.status == TraceStatus::SoftenedFeasible),
            resets: count(&|s| s.events.contains(&StepEvent::EstimatorReset)),
            segment_switches: count(&|s| s.events.contains(&StepEvent::SegmentSwitch)),
            final_theta_volume,
            mean_solve_ms: if times.is_empty() {
                0.0
            } else {
                times.iter().sum::<f64>() / times.len() as f64
            },
            max_solve_ms: times.iter().copied().fold(0.0, f64::max),
        }
    }
}

/// Column order of the trace CSV.
pub const CSV_COLUMNS: [&str; 24] = [
    "t",
    "s",
    "curvature",
    "x1",
    "x2",
    "x3",
    "x4",
    "dx1",
    "dx2",
    "dx3",
    "dx4",
    "delta",
    "ddelta",
    "v_star",
    "status",
    "slack",
    "n_theta_rows",
    "viol_ecg",
    "viol_dpsi",
    "viol_delta",
    "w1",
    "w2",
    "w3",
    "w4",
];

/// One CSV line; field order is the file's column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub t: f64,
    pub s: f64,
    pub curvature: f64,
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
    pub x4: f64,
    pub dx1: f64,
    pub dx2: f64,
    pub dx3: f64,
    pub dx4: f64,
    pub delta: f64,
    pub ddelta: f64,
    pub v_star: f64,
    pub status: TraceStatus,
    pub slack: f64,
    pub n_theta_rows: usize,
    pub viol_ecg: f64,
    pub viol_dpsi: f64,
    pub viol_delta: f64,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
}

impl From<&TraceStep> for CsvRow {
    fn from(s: &TraceStep) -> Self {
        Self {
            t: s.t,
            s: s.s,
            curvature: s.curvature,
            x1: s.x[0],
            x2: s.x[1],
            x3: s.x[2],
            x4: s.x[3],
            dx1: s.dx[0],
            dx2: s.dx[1],
            dx3: s.dx[2],
            dx4: s.dx[3],
            delta: s.delta,
            ddelta: s.d_delta,
            v_star: s.v_star,
            status: s.status,
            slack: s.slack,
            n_theta_rows: s.theta.as_ref().map_or(0, |p| p.n_rows()),
            viol_ecg: s.violations[0],
            viol_dpsi: s.violations[1],
            viol_delta: s.violations[2],
            w1: s.w[0],
            w2: s.w[1],
            w3: s.w[2],
            w4: s.w[3],
        }
    }
}

pub fn write_csv(trace: &SimTrace, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if trace.steps.is_empty() {
        w.write_record(CSV_COLUMNS)?;
    }
    for row in trace.to_rows() {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != CSV_COLUMNS[..] {
        return Err(super::HarnessError::Config(format!("unexpected CSV header {header:?}")));
    }
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Serialize)]
struct ThetaLine<'a> {
    step: usize,
    t: f64,
    #[serde(flatten)]
    rows: &'a PolytopeRows,
}

/// One JSON object per step holding the parameter set in row-list form.
pub(super) fn write_theta_rows(trace: &SimTrace, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in &trace.steps {
        if let Some(theta) = &s.theta {
            let rows = PolytopeRows::from(theta.clone());
            serde_json::to_writer(
                &mut f,
                &ThetaLine {
                    step: s.step,
                    t: s.t,
                    rows: &rows,
                },
            )?;
            f.write_all(b"\n")?;
        }
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::{run, Scenario};
    use super::*;

    #[test]
    fn csv_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let out = run(&Scenario {
            steps: 12,
            initial_error: vec![0.8, 0.0, 0.0, 0.0],
            ..Scenario::default()
        })
        .unwrap();
        let path = dir.path().join("trace.csv");
        write_csv(&out.trace, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS[..].join(","));
        assert_eq!(read_csv(&path).unwrap(), out.trace.to_rows());
    }

    #[test]
    fn empty_trace_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        let trace = SimTrace {
            scenario: "empty".into(),
            controller: ControllerKind::Lqr,
            steps: vec![],
        };
        write_csv(&trace, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(read_csv(&path).unwrap().is_empty());
    }

    #[test]
    fn theta_rows_parse_back() {
        let dir = tempfile::tempdir().unwrap();
        let out = run(&Scenario {
            steps: 5,
            ..Scenario::default()
        })
        .unwrap();
        let path = dir.path().join("theta.jsonl");
        write_theta_rows(&out.trace, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 6);
        for (line, st) in text.lines().zip(&out.trace.steps) {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["step"], st.step);
            let rows: PolytopeRows = serde_json::from_value(v).unwrap();
            let p = Polytope::try_from(rows).unwrap();
            assert!(p.set_eq(st.theta.as_ref().unwrap(), 1e-9).unwrap());
        }
    }
}
