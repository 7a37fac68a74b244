//! Acceptance checks, each against an oracle that does not reuse the code under test.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::controller::{
    self, build_stacked, dual_reformulation_check, terminal_set, ConstraintSet, ControllerConfig, CostMode,
    ThetaCoupling,
};
use crate::harness::{self, ControllerKind, OffsetChange, Plant, Scenario, StepEvent, TraceStatus};
use crate::polytope::Polytope;
use crate::vehicle::{self, DiscreteModel, RoadSegment, VehicleParams};

type CheckResult = std::result::Result<Outcome, Box<dyn std::error::Error + Send + Sync>>;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
    pub budget_seconds: f64,
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] {:>2} {:<12} {:.2}s/{:.0}s  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.seconds,
            self.budget_seconds,
            self.detail
        )
    }
}

struct Check {
    id: u8,
    name: &'static str,
    budget_seconds: f64,
    run: fn() -> CheckResult,
}

const CHECKS: [Check; 10] = [
    Check {
        id: 1,
        name: "model",
        budget_seconds: 1.0,
        run: model_construction,
    },
    Check {
        id: 2,
        name: "estimator",
        budget_seconds: 120.0,
        run: estimator_soundness,
    },
    Check {
        id: 3,
        name: "duality",
        budget_seconds: 30.0,
        run: duality_equivalence,
    },
    Check {
        id: 4,
        name: "terminal",
        budget_seconds: 60.0,
        run: terminal_invariance,
    },
    Check {
        id: 5,
        name: "feasibility",
        budget_seconds: 300.0,
        run: recursive_feasibility,
    },
    Check {
        id: 6,
        name: "baseline",
        budget_seconds: 30.0,
        run: baseline_contrast,
    },
    Check {
        id: 7,
        name: "reset",
        budget_seconds: 30.0,
        run: reset_behavior,
    },
    Check {
        id: 8,
        name: "lqr",
        budget_seconds: 1.0,
        run: lqr_synthesis,
    },
    Check {
        id: 9,
        name: "toy",
        budget_seconds: 60.0,
        run: toy_grid_search,
    },
    Check {
        id: 10,
        name: "performance",
        budget_seconds: 60.0,
        run: performance,
    },
];

/// Suite names accepted by [`run_suite`], besides `all`.
pub fn suite_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.name).collect()
}

fn execute(check: &Check) -> CheckReport {
    let start = Instant::now();
    let outcome = (check.run)().unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
    let seconds = start.elapsed().as_secs_f64();
    let in_time = seconds < check.budget_seconds;
    let detail = if in_time {
        outcome.detail
    } else {
        format!("{} (over the time budget)", outcome.detail)
    };
    CheckReport {
        id: check.id,
        name: check.name,
        passed: outcome.passed && in_time,
        detail,
        seconds,
        budget_seconds: check.budget_seconds,
    }
}

/// Runs one check by name or number, or every check for `all`.
pub fn run_suite(name: &str) -> Option<Vec<CheckReport>> {
    if name == "all" {
        return Some(CHECKS.iter().map(execute).collect());
    }
    CHECKS
        .iter()
        .find(|c| c.name == name || c.id.to_string() == name)
        .map(|c| vec![execute(c)])
}

/// The continuous matrices for the sedan at 30 m/s, evaluated by hand.
const SEDAN_A: [[f64; 4]; 4] = [
    [0.0, 1.0, 0.0, 0.0],
    [0.0, -1.916174863387978, 57.485245901639345, 1.1347937887067396],
    [0.0, 0.0, 0.0, 1.0],
    [0.0, 0.5972598887930208, -17.917796663790625, -2.29005697792158],
];
const SEDAN_B1: [f64; 4] = [0.0, 22.24207650273224, 0.0, 13.48572217428818];
const SEDAN_B2: [f64; 4] = [0.0, -28.86520621129326, 0.0, -2.29005697792158];

fn rel_match(actual: f64, expected: f64, rel: f64) -> bool {
    if expected == 0.0 {
        actual.abs() <= 1e-12
    } else {
        ((actual - expected) / expected).abs() <= rel
    }
}

fn model_construction() -> CheckResult {
    let params = VehicleParams::sedan(30.0);
    let cm = vehicle::build_continuous(&params, &DMatrix::from_element(4, 2, 1.0))?;
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for i in 0..4 {
        for j in 0..4 {
            ok &= rel_match(cm.a[(i, j)], SEDAN_A[i][j], 1e-4);
            if SEDAN_A[i][j] != 0.0 {
                worst = worst.max(((cm.a[(i, j)] - SEDAN_A[i][j]) / SEDAN_A[i][j]).abs());
            }
        }
        ok &= rel_match(cm.b1[(i, 0)], SEDAN_B1[i], 1e-4) && rel_match(cm.b2[(i, 0)], SEDAN_B2[i], 1e-4);
    }
    let dm = vehicle::discretize(&cm, 0.1)?;
    let gain = vehicle::lqr_gain(
        &dm,
        &DMatrix::from_diagonal_element(4, 4, 2.0),
        &DMatrix::from_element(1, 1, 1.0),
    )?
    .gain;
    let gain_row = RowDVector::from_row_slice(gain.as_slice());
    let a = DMatrix::from_fn(4, 4, |i, j| SEDAN_A[i][j]);
    let b1 = DVector::from_row_slice(&SEDAN_B1);
    let b2 = DVector::from_row_slice(&SEDAN_B2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut residual: f64 = 0.0;
    for _ in 0..100 {
        let curvature = rng.gen_range(-0.05..0.05);
        let ss = vehicle::steady_state(&cm, &RoadSegment { curvature, length: 1.0 }, &gain_row)?;
        let r = curvature * params.vx;
        residual = residual.max((&a * &ss.x_ss + &b1 * ss.delta_ss + &b2 * r).amax());
    }
    let passed = ok && residual <= 1e-9;
    Ok(Outcome::new(
        passed,
        format!("matrix entries within 1e-4 relative: {ok} (worst {worst:.1e}); equilibrium residual {residual:.1e}"),
    ))
}

fn seeded(base: &Scenario, seeds: std::ops::Range<u64>) -> Vec<Scenario> {
    seeds.map(|seed| Scenario { seed, ..base.clone() }).collect()
}

fn estimator_soundness() -> CheckResult {
    let base = Scenario::default();
    let mut missing = 0usize;
    let mut not_nested = 0usize;
    let mut resets = 0usize;
    for out in harness::run_batch(&seeded(&base, 0..50)) {
        let out = out?;
        resets += out.summary.resets;
        let theta_a = DVector::from_vec(base.theta_true.clone());
        let sets: Vec<&Polytope> = out.trace.steps.iter().filter_map(|s| s.theta.as_ref()).collect();
        for (k, set) in sets.iter().enumerate() {
            if !set.contains_point(&theta_a, 1e-7)? {
                missing += 1;
            }
            if let Some(next) = sets.get(k + 1) {
                if !set.contains_set(next, 1e-7)? {
                    not_nested += 1;
                }
            }
        }
    }
    Ok(Outcome::new(
        missing == 0 && not_nested == 0 && resets == 0,
        format!(
            "50 runs: true offset outside the set at {missing} steps, non-nested updates {not_nested}, resets {resets}"
        ),
    ))
}

fn random_polytope(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> crate::polytope::Result<Polytope> {
    let lower: Vec<f64> = (0..dim).map(|_| -radius * rng.gen_range(0.3..1.0)).collect();
    let upper: Vec<f64> = (0..dim).map(|_| radius * rng.gen_range(0.3..1.0)).collect();
    let boxed = Polytope::from_box(&lower, &upper)?;
    if rng.gen_bool(0.5) {
        return Ok(boxed);
    }
    // A random cut that keeps the origin strictly inside.
    let normal = DMatrix::from_fn(1, dim, |_, _| rng.gen_range(-1.0..1.0));
    let cut = Polytope::new(normal, DVector::from_element(1, 0.3 * radius))?;
    boxed.intersect(&cut)
}

fn duality_equivalence() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut rows = 0usize;
    for instance in 0..100 {
        let n = rng.gen_range(2..=4);
        let p = rng.gen_range(1..=2);
        let horizon = rng.gen_range(1..=3);
        let a = DMatrix::from_fn(n, n, |i, j| if i == j { 0.6 } else { 0.0 } + rng.gen_range(-0.3..0.3));
        let b = DMatrix::from_fn(n, 1, |_, _| rng.gen_range(-1.0..1.0));
        let e = DMatrix::from_fn(n, p, |_, _| rng.gen_range(-0.5..0.5));
        let model = DiscreteModel::new(a, b, e, 0.1)?;
        let gain = DMatrix::from_fn(1, n, |_, _| rng.gen_range(-0.3..0.3));
        let s = rng.gen_range(2..=4);
        let cons = ConstraintSet::new(
            DMatrix::from_fn(s, n, |_, _| rng.gen_range(-1.0..1.0)),
            DMatrix::from_fn(s, 1, |_, _| rng.gen_range(-1.0..1.0)),
            DVector::from_fn(s, |_, _| rng.gen_range(0.5..2.0)),
        )?;
        let terminal = random_polytope(&mut rng, n, 1.0)?;
        let w = random_polytope(&mut rng, n, 0.2)?;
        let theta = random_polytope(&mut rng, p, 0.5)?;
        let coupling = if instance % 2 == 0 {
            ThetaCoupling::PerStep
        } else {
            ThetaCoupling::Constant
        };
        let problem = build_stacked(&model, &gain, &cons, &terminal, horizon)?.tighten(&w, &theta, coupling)?;
        rows += problem.n_rows();
        worst = worst.max(dual_reformulation_check(&problem, &w, &theta, coupling)?);
    }
    Ok(Outcome::new(
        worst <= 1e-7,
        format!("100 instances, {rows} rows: largest gap {worst:.1e}"),
    ))
}

/// Every vertex of `{x : Hx ≤ h}` by solving each square subsystem of rows.
fn enumerate_vertices(p: &Polytope) -> Vec<DVector<f64>> {
    let (h, b) = (p.normals(), p.offsets());
    let (m, n) = (h.nrows(), h.ncols());
    let mut out: Vec<DVector<f64>> = Vec::new();
    if m < n {
        return out;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    loop {
        let sub = h.select_rows(idx.iter());
        let rhs = DVector::from_iterator(n, idx.iter().map(|&i| b[i]));
        if sub.determinant().abs() > 1e-12 {
            if let Some(x) = sub.lu().solve(&rhs) {
                let feasible = (h * &x - b).iter().all(|r| *r <= 1e-9);
                if feasible && !out.iter().any(|v| (v - &x).amax() <= 1e-9) {
                    out.push(x);
                }
            }
        }
        let mut k = n;
        loop {
            if k == 0 {
                return out;
            }
            k -= 1;
            if idx[k] < m - n + k {
                idx[k] += 1;
                for j in k + 1..n {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Hit-and-run samples from the interior of a bounded polytope.
fn hit_and_run(p: &Polytope, start: DVector<f64>, count: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let (h, b) = (p.normals(), p.offsets());
    let mut x = start;
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let d = DVector::from_fn(x.len(), |_, _| rng.gen_range(-1.0..1.0));
        let hd = h * &d;
        let slack = b - h * &x;
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for i in 0..h.nrows() {
            if hd[i] > 1e-14 {
                hi = hi.min(slack[i] / hd[i]);
            } else if hd[i] < -1e-14 {
                lo = lo.max(slack[i] / hd[i]);
            }
        }
        if lo.is_finite() && hi.is_finite() && hi > lo {
            x += d * rng.gen_range(lo..=hi);
            out.push(x.clone());
        }
    }
    out
}

fn max_row_excess(p: &Polytope, x: &DVector<f64>) -> f64 {
    (p.normals() * x - p.offsets()).max()
}

fn terminal_invariance() -> CheckResult {
    let scenario = Scenario::default();
    let plant = Plant::new(&scenario)?;
    let run = harness::run(&scenario)?;
    let theta_t = run
        .trace
        .steps
        .last()
        .and_then(|s| s.theta.clone())
        .ok_or("adaptive run produced no parameter set")?;
    let terminal = plant.terminal_set(&theta_t)?;
    let a_cl = plant.model.closed_loop(&plant.gain);
    let e = &plant.model.e;

    let x_vertices = enumerate_vertices(&terminal);
    let w_vertices = enumerate_vertices(&plant.disturbance);
    let theta_vertices = enumerate_vertices(&theta_t);
    let mut worst = f64::NEG_INFINITY;
    // The map is affine, so its worst case over the product set sits at a vertex triple.
    for x in &x_vertices {
        let base = &a_cl * x;
        for w in &w_vertices {
            for th in &theta_vertices {
                worst = worst.max(max_row_excess(&terminal, &(&base + w + e * th)));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (center, _) = terminal.chebyshev_center()?;
    let xs = hit_and_run(&terminal, center, 1000, &mut rng);
    let r = scenario.w_radius;
    for x in &xs {
        let w = DVector::from_fn(4, |_, _| rng.gen_range(-r..=r));
        let weights: Vec<f64> = theta_vertices.iter().map(|_| rng.gen_range(0.0..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let th = theta_vertices
            .iter()
            .zip(&weights)
            .fold(DVector::zeros(2), |acc, (v, wt)| acc + v * (wt / total));
        worst = worst.max(max_row_excess(&terminal, &(&a_cl * x + w + e * th)));
    }
    let state_set = plant.constraints.state_set(&plant.gain)?;
    let inside_constraints = state_set.contains_set(&terminal, 1e-7)?;

    // Shrinking the parameter set may only enlarge the terminal set.
    let mut nested_ok = 0usize;
    let pairs = nested_parameter_pairs(&scenario, &theta_t, &mut rng)?;
    for (outer, inner) in &pairs {
        let big = plant.terminal_set(inner)?;
        let small = plant.terminal_set(outer)?;
        if big.contains_set(&small, 1e-7)? {
            nested_ok += 1;
        }
    }
    let passed = worst <= 1e-7 && inside_constraints && nested_ok == pairs.len();
    Ok(Outcome::new(
        passed,
        format!(
            "{} vertices and 1000 samples: largest excess {worst:.1e}; inside constraints {inside_constraints}; monotone on {nested_ok}/{} nested pairs",
            x_vertices.len(),
            pairs.len()
        ),
    ))
}

fn nested_parameter_pairs(
    scenario: &Scenario,
    theta_t: &Polytope,
    rng: &mut ChaCha8Rng,
) -> crate::polytope::Result<Vec<(Polytope, Polytope)>> {
    let (lo0, hi0) = (&scenario.theta0_lower, &scenario.theta0_upper);
    let theta0 = Polytope::from_box(lo0, hi0)?;
    let mut pairs = vec![(theta0, theta_t.clone())];
    while pairs.len() < 10 {
        let frac_out = rng.gen_range(0.5..1.0);
        let outer_lo: Vec<f64> = lo0.iter().map(|v| v * frac_out).collect();
        let outer_hi: Vec<f64> = hi0.iter().map(|v| v * frac_out).collect();
        let inner_lo: Vec<f64> = outer_lo
            .iter()
            .zip(&outer_hi)
            .map(|(l, h)| l + rng.gen_range(0.0..0.4) * (h - l))
            .collect();
        let inner_hi: Vec<f64> = inner_lo
            .iter()
            .zip(&outer_hi)
            .map(|(l, h)| l + rng.gen_range(0.1..1.0) * (h - l))
            .collect();
        pairs.push((
            Polytope::from_box(&outer_lo, &outer_hi)?,
            Polytope::from_box(&inner_lo, &inner_hi)?,
        ));
    }
    Ok(pairs)
}

fn recursive_feasibility() -> CheckResult {
    let base = Scenario::default();
    let (mut infeasible_start, mut infeasible, mut violations, mut failures) = (0, 0, 0, 0);
    for out in harness::run_batch(&seeded(&base, 0..50)) {
        let out = out?;
        if out.trace.steps.first().map(|s| s.status) != Some(TraceStatus::Feasible) {
            infeasible_start += 1;
        }
        infeasible += out.summary.infeasible_steps;
        violations += out.summary.violation_steps;
        failures += usize::from(out.failure.is_some());
    }
    Ok(Outcome::new(
        infeasible_start == 0 && infeasible == 0 && violations == 0 && failures == 0,
        format!(
            "50 runs: infeasible at start {infeasible_start}, infeasible steps {infeasible}, violating steps {violations}, aborted {failures}"
        ),
    ))
}

fn baseline_contrast() -> CheckResult {
    let base = Scenario {
        seed: 0,
        ..Scenario::default()
    };
    let adaptive = harness::run(&Scenario {
        controller: ControllerKind::Adaptive,
        ..base.clone()
    })?;
    let nominal = harness::run(&Scenario {
        controller: ControllerKind::Nominal,
        ..base
    })?;
    let (a, n) = (adaptive.summary.violation_steps, nominal.summary.violation_steps);
    Ok(Outcome::new(
        a == 0 && n >= 1 && adaptive.failure.is_none(),
        format!(
            "seed 0: adaptive violates at {a} steps, nominal at {n} steps (largest lateral excess {:.3} m)",
            nominal.summary.max_violation[0]
        ),
    ))
}

/// Step of the offset change in the reset scenario.
pub const OFFSET_CHANGE_STEP: usize = 100;

/// The default scenario with the true offset raised partway through.
pub fn reset_scenario() -> Scenario {
    Scenario {
        seed: 0,
        offset_change: Some(OffsetChange {
            step: OFFSET_CHANGE_STEP,
            theta: vec![-0.12, 0.31],
        }),
        ..Scenario::default()
    }
}

fn reset_behavior() -> CheckResult {
    let base = reset_scenario();
    let adaptive = harness::run(&Scenario {
        controller: ControllerKind::Adaptive,
        ..base.clone()
    })?;
    let lqr = harness::run_lqr_baseline(&base)?;
    let reset_at = adaptive
        .trace
        .steps
        .iter()
        .find(|s| s.step >= OFFSET_CHANGE_STEP && s.events.contains(&StepEvent::EstimatorReset))
        .map(|s| s.step);
    let Some(reset_at) = reset_at else {
        return Ok(Outcome::new(
            false,
            "the parameter set was never reset after the offset change",
        ));
    };
    let settled = reset_at + base.horizon;
    let post = adaptive
        .trace
        .steps
        .iter()
        .filter(|s| s.step >= settled && s.violated())
        .count();
    let lqr_violations = lqr.summary.violation_steps;
    Ok(Outcome::new(
        post == 0 && lqr_violations >= 1 && adaptive.failure.is_none(),
        format!(
            "reset at step {reset_at}; adaptive violations from step {settled}: {post} (whole run {}); lqr violations {lqr_violations}",
            adaptive.summary.violation_steps
        ),
    ))
}

fn lqr_synthesis() -> CheckResult {
    let scenario = Scenario::default();
    let plant = Plant::new(&scenario)?;
    let q = DMatrix::from_diagonal_element(4, 4, 2.0);
    let r = DMatrix::from_element(1, 1, 1.0);
    let sol = vehicle::lqr_gain(&plant.model, &q, &r)?;
    let residual = vehicle::dare_residual(&plant.model, &q, &r, &sol.cost_to_go);
    let rho = vehicle::spectral_radius(&plant.model.closed_loop(&sol.gain));
    let scalar = DiscreteModel::new(
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::zeros(1, 1),
        1.0,
    )?;
    let one = DMatrix::from_element(1, 1, 1.0);
    let p = vehicle::lqr_gain(&scalar, &one, &one)?.cost_to_go[(0, 0)];
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    Ok(Outcome::new(
        residual <= 1e-8 && rho < 1.0 && (p - golden).abs() <= 1e-9,
        format!(
            "DARE residual {residual:.1e}; closed-loop spectral radius {rho:.4}; scalar P − golden ratio {:.1e}",
            p - golden
        ),
    ))
}

/// The scalar toy: `x⁺ = x + Δδ + w`, `|x| ≤ 1`, `|Δδ| ≤ 1`, `|w| ≤ TOY_W`.
const TOY_W: f64 = 0.05;

/// Largest `T` with `[−T, T]` robustly invariant for `x⁺ = a x + w` under
/// `|x| ≤ 1` and `|k x| ≤ 1`, by unrolling the scalar recursion.
fn toy_terminal_radius(a: f64, k: f64) -> f64 {
    let mut t = f64::INFINITY;
    let (mut a_pow, mut spread) = (1.0, 0.0);
    for _ in 0..200 {
        t = t
            .min((1.0 - spread) / a_pow)
            .min((1.0 - k.abs() * spread) / (k.abs() * a_pow));
        spread += a_pow * TOY_W;
        a_pow *= a;
    }
    t
}

fn toy_grid_search() -> CheckResult {
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    let k = golden / (1.0 + golden);
    let a = 1.0 - k;
    let model = DiscreteModel::new(
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::zeros(1, 1),
        1.0,
    )?;
    let gain = DMatrix::from_element(1, 1, k);
    let cons = ConstraintSet::new(
        DMatrix::from_column_slice(4, 1, &[1.0, -1.0, 0.0, 0.0]),
        DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 1.0, -1.0]),
        DVector::from_element(4, 1.0),
    )?;
    let w = Polytope::hypercube(1, TOY_W)?;
    let theta = Polytope::point(&[0.0])?;
    let terminal = terminal_set(&model, &gain, &cons, &w, &theta, 200)?;
    let radius = toy_terminal_radius(a, k);
    let (t_lo, t_hi) = terminal.bounding_box()?;
    let terminal_gap = (t_hi[0] - radius).abs().max((t_lo[0] + radius).abs());
    let cfg = ControllerConfig {
        horizon: 2,
        q: DMatrix::from_element(1, 1, 1.0),
        r: DMatrix::from_element(1, 1, 1.0),
        cost_mode: CostMode::OneNorm,
        ..ControllerConfig::lane_keeping()
    };
    let problem = build_stacked(&model, &gain, &cons, &terminal, 2)?.tighten(&w, &theta, ThetaCoupling::PerStep)?;

    // Tightened bounds worked out by hand for N = 2.
    let x1_bound = 1.0 - TOY_W;
    let dd1_bound = 1.0 - k * TOY_W;
    let x2_bound = radius - (a * TOY_W + TOY_W);
    let step: f64 = 1e-3;
    let span: f64 = 1.7;
    let ticks = (2.0 * span / step).round() as i64;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    let mut feasible_states = 0;
    for _ in 0..20 {
        let x0: f64 = rng.gen_range(-0.9..0.9);
        let mut best = f64::INFINITY;
        for i in 0..=ticks {
            let v0 = -span + i as f64 * step;
            if (-k * x0 + v0).abs() > 1.0 {
                continue;
            }
            let x1 = a * x0 + v0;
            if x1.abs() > x1_bound {
                continue;
            }
            let head = x0.abs() + v0.abs() + x1.abs();
            if head >= best {
                continue;
            }
            for j in 0..=ticks {
                let v1 = -span + j as f64 * step;
                if (-k * x1 + v1).abs() > dd1_bound || (a * x1 + v1).abs() > x2_bound {
                    continue;
                }
                best = best.min(head + v1.abs());
            }
        }
        let sol = controller::solve(&problem, &DVector::from_element(1, x0), &cfg, false)?;
        if best.is_finite() {
            feasible_states += 1;
            worst = worst.max((sol.objective - best).abs());
        }
    }
    Ok(Outcome::new(
        worst <= 2e-3 && feasible_states == 20 && terminal_gap <= 1e-7,
        format!("20 states: largest optimum gap {worst:.1e}; terminal interval off by {terminal_gap:.1e}"),
    ))
}

fn performance() -> CheckResult {
    let scenario = Scenario::default();
    let plant = Plant::new(&scenario)?;
    let run_start = Instant::now();
    let out = harness::run(&scenario)?;
    let run_seconds = run_start.elapsed().as_secs_f64();
    let mut times = Vec::new();
    for st in out.trace.steps.iter().step_by(10) {
        let theta = st.theta.clone().ok_or("adaptive step without a parameter set")?;
        let start = Instant::now();
        let terminal = plant.terminal_set(&theta)?;
        let problem = plant.tightened_problem(&theta, &terminal)?;
        let _ = controller::solve(&problem, &st.dx, &plant.config, false)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let median = times[times.len() / 2];
    Ok(Outcome::new(
        median < 50.0 && run_seconds < 10.0,
        format!(
            "median step {median:.2} ms over {} steps; 200-step run {run_seconds:.2} s",
            times.len()
        ),
    ))
}
