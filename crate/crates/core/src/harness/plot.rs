//! Hand-written SVG line charts and parameter-set drawings.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::polytope::Polytope;

use super::{HarnessError, Result, Scenario, SimTrace};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 220.0;
const MARGIN: f64 = 44.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

#[derive(Debug, Clone, PartialEq)]
pub struct PlotFiles {
    pub states: PathBuf,
    pub input: PathBuf,
    pub theta: PathBuf,
}

/// One labelled polyline.
pub struct Series<'a> {
    pub label: &'a str,
    pub t: Vec<f64>,
    pub y: Vec<f64>,
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    top: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0).max(1e-12) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        self.top + HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0).max(1e-12) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn finite_range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    values.filter(|v| v.is_finite()).fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

/// One panel of line series with dashed horizontal lines at `±bound`.
fn panel(out: &mut String, top: f64, title: &str, series: &[Series], bound: Option<f64>) {
    let (x0, x1) = finite_range(series.iter().flat_map(|s| s.t.iter().copied())).unwrap_or((0.0, 1.0));
    let (mut y0, mut y1) = finite_range(series.iter().flat_map(|s| s.y.iter().copied())).unwrap_or((-1.0, 1.0));
    if let Some(b) = bound {
        y0 = y0.min(-b);
        y1 = y1.max(b);
    }
    let pad = 0.05 * (y1 - y0).max(1e-6);
    let f = Frame {
        x0,
        x1,
        y0: y0 - pad,
        y1: y1 + pad,
        top,
    };
    let _ = writeln!(
        out,
        r##"<rect x="{m}" y="{t}" width="{w}" height="{h}" fill="none" stroke="#999"/>"##,
        m = MARGIN,
        t = top + MARGIN,
        w = WIDTH - 2.0 * MARGIN,
        h = HEIGHT - 2.0 * MARGIN
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-size="13">{}</text>"#,
        MARGIN,
        top + MARGIN - 8.0,
        escape(title)
    );
    for (v, y) in [(f.y0, f.py(f.y0)), (f.y1, f.py(f.y1))] {
        let _ = writeln!(out, r#"<text x="2" y="{:.1}" font-size="10">{:.3}</text>"#, y + 3.0, v);
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">t = {:.1} s</text>"#,
        WIDTH - MARGIN,
        top + HEIGHT - MARGIN + 14.0,
        x1
    );
    if let Some(b) = bound {
        for y in [b, -b] {
            let _ = writeln!(
                out,
                r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#444" stroke-dasharray="5,4"/>"##,
                f.px(x0),
                f.py(y),
                f.px(x1),
                f.py(y)
            );
        }
    }
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut d = String::new();
        let mut pen_down = false;
        for (t, y) in s.t.iter().zip(&s.y) {
            if !(t.is_finite() && y.is_finite()) {
                pen_down = false;
                continue;
            }
            let _ = write!(
                d,
                "{}{:.2},{:.2} ",
                if pen_down { "L" } else { "M" },
                f.px(*t),
                f.py(*y)
            );
            pen_down = true;
        }
        let _ = writeln!(
            out,
            r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            d.trim_end()
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" fill="{color}">{}</text>"#,
            WIDTH - MARGIN - 120.0,
            top + MARGIN + 14.0 * (k as f64 + 1.0),
            escape(s.label)
        );
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn document(panels: usize, body: &str) -> String {
    let h = HEIGHT * panels as f64;
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{h}\" viewBox=\"0 0 {WIDTH} {h}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n"
    )
}

fn non_empty(traces: &[&SimTrace]) -> Result<()> {
    if traces.is_empty() || traces.iter().any(|t| t.steps.is_empty()) {
        return Err(HarnessError::EmptyTrace);
    }
    Ok(())
}

fn series_of<'a>(trace: &'a SimTrace, f: impl Fn(&super::TraceStep) -> f64) -> Series<'a> {
    Series {
        label: trace.controller_label(),
        t: trace.steps.iter().map(|s| s.t).collect(),
        y: trace.steps.iter().map(f).collect(),
    }
}

/// Lateral and heading errors of one or more traces against their bounds.
pub fn states_svg(traces: &[&SimTrace], ecg_max: f64, dpsi_max: f64) -> Result<String> {
    non_empty(traces)?;
    let mut body = String::new();
    let ecg: Vec<Series> = traces.iter().map(|t| series_of(t, |s| s.dx[0])).collect();
    panel(&mut body, 0.0, "lateral error Δe_cg [m]", &ecg, Some(ecg_max));
    let dpsi: Vec<Series> = traces.iter().map(|t| series_of(t, |s| s.dx[2])).collect();
    panel(&mut body, HEIGHT, "heading error Δδψ [rad]", &dpsi, Some(dpsi_max));
    Ok(document(2, &body))
}

/// Steering increments of one or more traces against their bound.
pub fn input_svg(traces: &[&SimTrace], ddelta_max: f64) -> Result<String> {
    non_empty(traces)?;
    let mut body = String::new();
    let dd: Vec<Series> = traces.iter().map(|t| series_of(t, |s| s.d_delta)).collect();
    panel(&mut body, 0.0, "steering increment Δδ [rad]", &dd, Some(ddelta_max));
    let sl: Vec<Series> = traces.iter().map(|t| series_of(t, |s| s.slack)).collect();
    panel(&mut body, HEIGHT, "constraint slack", &sl, None);
    Ok(document(2, &body))
}

/// Parameter-set snapshots as nested polygons with the true offset marked.
///
/// Sets of dimension other than two are drawn as per-axis bounds over time.
pub fn theta_svg(snapshots: &[(f64, Polytope)], theta_true: Option<&[f64]>) -> Result<String> {
    let Some((_, first)) = snapshots.first() else {
        return Err(HarnessError::EmptyTrace);
    };
    if first.dim() != 2 {
        return theta_bounds_svg(snapshots);
    }
    let polys: Vec<(String, Vec<[f64; 2]>)> = snapshots
        .iter()
        .map(|(t, p)| Ok((format!("t = {t:.1} s"), p.vertices_2d()?)))
        .collect::<Result<_>>()?;
    let marker = theta_true.map(|t| ("true offset", [t[0], t[1]]));
    Ok(polygons_svg(
        "parameter set snapshots (θ1, θ2)",
        ("θ1", "θ2"),
        &polys,
        marker,
    ))
}

/// Labelled polygons on equal axes, later ones drawn darker, with an optional marked point.
pub fn polygons_svg(
    title: &str,
    axes: (&str, &str),
    polys: &[(String, Vec<[f64; 2]>)],
    marker: Option<(&str, [f64; 2])>,
) -> String {
    let pts = polys
        .iter()
        .flat_map(|(_, v)| v.iter())
        .map(|v| (v[0], v[1]))
        .chain(marker.map(|(_, m)| (m[0], m[1])));
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (-1.0, 1.0, -1.0, 1.0);
    }
    let side = 420.0;
    let span = (x1 - x0).max(y1 - y0).max(1e-6) * 1.1;
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    let px = |x: f64| MARGIN + (x - cx + span / 2.0) / span * (side - 2.0 * MARGIN);
    let py = |y: f64| side - MARGIN - (y - cy + span / 2.0) / span * (side - 2.0 * MARGIN);
    let mut body = String::new();
    let n = polys.len();
    for (k, (label, verts)) in polys.iter().enumerate() {
        let shade = 0.15 + 0.6 * k as f64 / n.max(2).saturating_sub(1) as f64;
        let points: Vec<String> = verts
            .iter()
            .map(|v| format!("{:.2},{:.2}", px(v[0]), py(v[1])))
            .collect();
        let _ = writeln!(
            body,
            r##"<polygon points="{}" fill="#1f77b4" fill-opacity="0.06" stroke="#1f77b4" stroke-opacity="{shade:.2}"><title>{}</title></polygon>"##,
            points.join(" "),
            escape(label)
        );
    }
    if let Some((label, m)) = marker {
        let _ = writeln!(
            body,
            r##"<circle cx="{:.2}" cy="{:.2}" r="4" fill="#d62728"><title>{}</title></circle>"##,
            px(m[0]),
            py(m[1]),
            escape(label)
        );
    }
    let _ = writeln!(
        body,
        r#"<text x="{MARGIN}" y="20" font-size="13">{}</text>"#,
        escape(title)
    );
    let _ = writeln!(
        body,
        r#"<text x="{MARGIN}" y="{:.0}" font-size="10">{} ∈ [{x0:.3}, {x1:.3}], {} ∈ [{y0:.3}, {y1:.3}]</text>"#,
        side - 10.0,
        escape(axes.0),
        escape(axes.1)
    );
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{side}\" height=\"{side}\" viewBox=\"0 0 {side} {side}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n"
    )
}

fn theta_bounds_svg(snapshots: &[(f64, Polytope)]) -> Result<String> {
    type Bounds = (Vec<f64>, Vec<f64>);
    let boxes: Vec<(f64, Bounds)> = snapshots
        .iter()
        .map(|(t, p)| Ok((*t, p.bounding_box()?)))
        .collect::<Result<_>>()?;
    let dim = snapshots[0].1.dim();
    let labels: Vec<(String, String)> = (0..dim)
        .map(|i| (format!("θ{} upper", i + 1), format!("θ{} lower", i + 1)))
        .collect();
    let mut series = Vec::new();
    for (i, (up, lo)) in labels.iter().enumerate() {
        let t: Vec<f64> = boxes.iter().map(|(t, _)| *t).collect();
        series.push(Series {
            label: up,
            t: t.clone(),
            y: boxes.iter().map(|(_, b)| b.1[i]).collect(),
        });
        series.push(Series {
            label: lo,
            t,
            y: boxes.iter().map(|(_, b)| b.0[i]).collect(),
        });
    }
    let mut body = String::new();
    panel(&mut body, 0.0, "parameter set bounds", &series, None);
    Ok(document(1, &body))
}

/// Every `every`-th parameter set of a trace, always including the last.
pub fn theta_snapshots(trace: &SimTrace, every: usize) -> Vec<(f64, Polytope)> {
    let with_theta: Vec<_> = trace
        .steps
        .iter()
        .filter_map(|s| s.theta.clone().map(|p| (s.t, p)))
        .collect();
    let mut out: Vec<_> = with_theta.iter().step_by(every.max(1)).cloned().collect();
    if let (Some(last), Some(kept)) = (with_theta.last(), out.last()) {
        if kept.0 != last.0 {
            out.push(last.clone());
        }
    }
    out
}

/// Writes `states.svg`, `input.svg` and `theta.svg` for one or more traces into `dir`.
///
/// The parameter-set drawing uses the first trace that carries a parameter set.
pub fn emit_plots(traces: &[&SimTrace], scenario: &Scenario, dir: &Path, prefix: &str) -> Result<PlotFiles> {
    non_empty(traces)?;
    std::fs::create_dir_all(dir)?;
    let files = PlotFiles {
        states: dir.join(format!("{prefix}states.svg")),
        input: dir.join(format!("{prefix}input.svg")),
        theta: dir.join(format!("{prefix}theta.svg")),
    };
    std::fs::write(&files.states, states_svg(traces, scenario.ecg_max, scenario.dpsi_max)?)?;
    std::fs::write(&files.input, input_svg(traces, scenario.ddelta_max)?)?;
    let snaps = traces
        .iter()
        .map(|t| theta_snapshots(t, (t.steps.len() / 10).max(1)))
        .find(|s| !s.is_empty())
        .unwrap_or_default();
    let theta_doc = if snaps.is_empty() {
        document(
            1,
            "<text x=\"44\" y=\"40\" font-size=\"13\">no parameter set (fixed-offset controllers)</text>\n",
        )
    } else {
        theta_svg(&snaps, Some(&scenario.theta_true))?
    };
    std::fs::write(&files.theta, theta_doc)?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::super::{run, ControllerKind};
    use super::*;

    #[test]
    fn empty_trace_is_rejected() {
        let trace = SimTrace {
            scenario: "e".into(),
            controller: ControllerKind::Lqr,
            steps: vec![],
        };
        assert!(matches!(states_svg(&[&trace], 1.0, 1.0), Err(HarnessError::EmptyTrace)));
        assert!(matches!(theta_svg(&[], None), Err(HarnessError::EmptyTrace)));
    }

    #[test]
    fn plots_are_written_for_an_overlay() {
        let dir = tempfile::tempdir().unwrap();
        let sc = Scenario {
            steps: 10,
            initial_error: vec![1.0, 0.0, 0.0, 0.0],
            ..Scenario::default()
        };
        let a = run(&sc).unwrap();
        let l = run(&Scenario {
            controller: ControllerKind::Lqr,
            ..sc.clone()
        })
        .unwrap();
        let files = emit_plots(&[&a.trace, &l.trace], &sc, dir.path(), "").unwrap();
        for f in [&files.states, &files.input, &files.theta] {
            let text = std::fs::read_to_string(f).unwrap();
            assert!(text.starts_with("<svg") && text.trim_end().ends_with("</svg>"));
        }
        let states = std::fs::read_to_string(&files.states).unwrap();
        assert_eq!(states.matches("<path").count(), 4);
        assert!(std::fs::read_to_string(&files.theta).unwrap().contains("<polygon"));
    }

    #[test]
    fn higher_dimensional_sets_fall_back_to_bounds() {
        let p = Polytope::from_box(&[-1.0; 3], &[1.0; 3]).unwrap();
        let svg = theta_svg(&[(0.0, p.clone()), (1.0, p)], None).unwrap();
        assert_eq!(svg.matches("<path").count(), 6);
    }
}
