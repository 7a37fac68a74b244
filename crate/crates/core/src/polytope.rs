//! Convex polytopes in H-representation `{x : Hx ≤ h}`.
//!
//! Every stored row is scaled to a unit-norm normal. Set relations are decided
//! with support-function LPs, so no canonical form is ever needed: two
//! polytopes are equal when each contains the other.

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{solve_lp, LinearProgram, LpStatus, OptimError};

/// Tolerance used for set equality and containment checks.
pub const SET_TOL: f64 = 1e-7;
/// A row is redundant when its maximum over the remaining rows is within this of its offset.
const REDUNDANCY_TOL: f64 = 1e-9;
const ZERO_ROW: f64 = 1e-12;
/// Default cap on the backward reachability iteration in [`max_rpi_set`].
pub const DEFAULT_RPI_ITERATIONS: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolytopeError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("polytope is empty")]
    EmptySet,
    #[error("polytope is unbounded in the requested direction")]
    UnboundedDirection,
    #[error("invariant set iteration did not converge within {iterations} iterations")]
    NotConverged { iterations: usize },
    #[error("malformed polytope: {0}")]
    Malformed(String),
    #[error(transparent)]
    Solver(#[from] OptimError),
}

pub type Result<T> = std::result::Result<T, PolytopeError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolytopeRows", into = "PolytopeRows")]
pub struct Polytope {
    normals: DMatrix<f64>,
    offsets: DVector<f64>,
    dim: usize,
    /// Set when construction met a row `0ᵀx ≤ b` with `b < 0`.
    trivially_empty: bool,
}

/// Row-list form used for serialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolytopeRows {
    pub dim: usize,
    pub normals: Vec<Vec<f64>>,
    pub offsets: Vec<f64>,
}

impl TryFrom<PolytopeRows> for Polytope {
    type Error = PolytopeError;

    fn try_from(rows: PolytopeRows) -> Result<Self> {
        if rows.normals.iter().any(|r| r.len() != rows.dim) {
            return Err(PolytopeError::Malformed("row length differs from dim".into()));
        }
        let m = rows.normals.len();
        let h = DMatrix::from_fn(m, rows.dim, |i, j| rows.normals[i][j]);
        Polytope::new(h, DVector::from_vec(rows.offsets))
    }
}

impl From<Polytope> for PolytopeRows {
    fn from(p: Polytope) -> Self {
        let mut normals: Vec<Vec<f64>> = p.normals.row_iter().map(|r| r.iter().copied().collect()).collect();
        let mut offsets: Vec<f64> = p.offsets.iter().copied().collect();
        if p.trivially_empty {
            normals.push(vec![0.0; p.dim]);
            offsets.push(-1.0);
        }
        PolytopeRows {
            dim: p.dim,
            normals,
            offsets,
        }
    }
}

impl Polytope {
    /// Builds `{x : normals·x ≤ offsets}`, normalizing each row.
    pub fn new(normals: DMatrix<f64>, offsets: DVector<f64>) -> Result<Self> {
        let dim = normals.ncols();
        if normals.nrows() != offsets.len() {
            return Err(PolytopeError::Malformed(format!(
                "{} normals but {} offsets",
                normals.nrows(),
                offsets.len()
            )));
        }
        if dim == 0 {
            return Err(PolytopeError::Malformed("dimension must be positive".into()));
        }
        if normals.iter().chain(offsets.iter()).any(|v| v.is_nan()) {
            return Err(PolytopeError::Malformed("NaN coefficient".into()));
        }
        let mut rows = Vec::with_capacity(normals.nrows());
        let mut trivially_empty = false;
        for (i, row) in normals.row_iter().enumerate() {
            let norm = row.norm();
            if norm <= ZERO_ROW {
                if offsets[i] < -ZERO_ROW {
                    trivially_empty = true;
                }
                continue;
            }
            if offsets[i] == f64::INFINITY {
                continue;
            }
            rows.push((row / norm, offsets[i] / norm));
        }
        Ok(Self::from_unit_rows(dim, rows, trivially_empty))
    }

    fn from_unit_rows(dim: usize, rows: Vec<(RowDVector<f64>, f64)>, trivially_empty: bool) -> Self {
        let m = rows.len();
        let mut normals = DMatrix::zeros(m, dim);
        let mut offsets = DVector::zeros(m);
        for (i, (a, b)) in rows.into_iter().enumerate() {
            normals.set_row(i, &a);
            offsets[i] = b;
        }
        Self {
            normals,
            offsets,
            dim,
            trivially_empty,
        }
    }

    /// The axis-aligned box `lower ≤ x ≤ upper`.
    pub fn from_box(lower: &[f64], upper: &[f64]) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(PolytopeError::DimensionMismatch {
                expected: lower.len(),
                found: upper.len(),
            });
        }
        let n = lower.len();
        let mut h = DMatrix::zeros(2 * n, n);
        let mut b = DVector::zeros(2 * n);
        for i in 0..n {
            h[(2 * i, i)] = 1.0;
            b[2 * i] = upper[i];
            h[(2 * i + 1, i)] = -1.0;
            b[2 * i + 1] = -lower[i];
        }
        Self::new(h, b)
    }

    /// The ∞-norm ball of the given radius.
    pub fn hypercube(dim: usize, radius: f64) -> Result<Self> {
        Self::from_box(&vec![-radius; dim], &vec![radius; dim])
    }

    /// The singleton `{point}` as a degenerate box.
    pub fn point(point: &[f64]) -> Result<Self> {
        Self::from_box(point, point)
    }

    /// All of ℝⁿ.
    pub fn universe(dim: usize) -> Result<Self> {
        Self::new(DMatrix::zeros(0, dim), DVector::zeros(0))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_rows(&self) -> usize {
        self.offsets.len()
    }

    pub fn normals(&self) -> &DMatrix<f64> {
        &self.normals
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.offsets
    }

    fn check_dim(&self, found: usize) -> Result<()> {
        if found != self.dim {
            return Err(PolytopeError::DimensionMismatch {
                expected: self.dim,
                found,
            });
        }
        Ok(())
    }

    /// Rows of both operands; the result is contained in each.
    pub fn intersect(&self, other: &Polytope) -> Result<Polytope> {
        self.check_dim(other.dim)?;
        let m = self.n_rows() + other.n_rows();
        let mut normals = DMatrix::zeros(m, self.dim);
        let mut offsets = DVector::zeros(m);
        normals.rows_mut(0, self.n_rows()).copy_from(&self.normals);
        normals
            .rows_mut(self.n_rows(), other.n_rows())
            .copy_from(&other.normals);
        offsets.rows_mut(0, self.n_rows()).copy_from(&self.offsets);
        offsets
            .rows_mut(self.n_rows(), other.n_rows())
            .copy_from(&other.offsets);
        Ok(Self {
            normals,
            offsets,
            dim: self.dim,
            trivially_empty: self.trivially_empty || other.trivially_empty,
        })
    }

    fn maximize(&self, direction: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        self.check_dim(direction.len())?;
        if self.trivially_empty {
            return Err(PolytopeError::EmptySet);
        }
        let lp = LinearProgram::new(-direction, self.normals.clone(), self.offsets.clone());
        let sol = solve_lp(&lp)?;
        match sol.status {
            LpStatus::Optimal => Ok((-sol.objective_value, sol.primal)),
            LpStatus::Infeasible => Err(PolytopeError::EmptySet),
            LpStatus::Unbounded => Err(PolytopeError::UnboundedDirection),
        }
    }

    /// `sup { dᵀx : x ∈ self }`.
    pub fn support(&self, direction: &DVector<f64>) -> Result<f64> {
        if direction.iter().all(|v| *v == 0.0) {
            // Still report emptiness faithfully.
            if self.is_empty()? {
                return Err(PolytopeError::EmptySet);
            }
            return Ok(0.0);
        }
        self.maximize(direction).map(|(v, _)| v)
    }

    /// A point attaining [`Polytope::support`].
    pub fn support_point(&self, direction: &DVector<f64>) -> Result<DVector<f64>> {
        self.maximize(direction).map(|(_, x)| x)
    }

    /// Support of the linear image `M·self` in `direction`, i.e. `support(Mᵀd)`.
    pub fn affine_image_support(&self, map: &DMatrix<f64>, direction: &DVector<f64>) -> Result<f64> {
        self.check_dim(map.ncols())?;
        if map.nrows() != direction.len() {
            return Err(PolytopeError::DimensionMismatch {
                expected: map.nrows(),
                found: direction.len(),
            });
        }
        self.support(&(map.transpose() * direction))
    }

    /// `Hx ≤ h + tol` elementwise.
    pub fn contains_point(&self, x: &DVector<f64>, tol: f64) -> Result<bool> {
        self.check_dim(x.len())?;
        if self.trivially_empty {
            return Ok(false);
        }
        Ok((&self.normals * x - &self.offsets).iter().all(|r| *r <= tol))
    }

    pub fn is_empty(&self) -> Result<bool> {
        if self.trivially_empty {
            return Ok(true);
        }
        let lp = LinearProgram::new(DVector::zeros(self.dim), self.normals.clone(), self.offsets.clone());
        Ok(solve_lp(&lp)?.status == LpStatus::Infeasible)
    }

    /// Whether `other ⊆ self`, checked row by row through supports of `other`.
    pub fn contains_set(&self, other: &Polytope, tol: f64) -> Result<bool> {
        self.check_dim(other.dim)?;
        if other.is_empty()? {
            return Err(PolytopeError::EmptySet);
        }
        if self.trivially_empty {
            return Ok(false);
        }
        for (a, b) in self.normals.row_iter().zip(self.offsets.iter()) {
            match other.support(&a.transpose()) {
                Ok(s) if s <= b + tol => {}
                Ok(_) | Err(PolytopeError::UnboundedDirection) => return Ok(false),
                Err(e) => return Err(e),
            }
        }
        Ok(true)
    }

    /// Mutual containment at tolerance `tol`.
    pub fn set_eq(&self, other: &Polytope, tol: f64) -> Result<bool> {
        Ok(self.contains_set(other, tol)? && other.contains_set(self, tol)?)
    }

    /// Removes redundant rows. Parallel rows collapse to the tightest one,
    /// then each remaining row is dropped if the others already imply it.
    pub fn reduce(&self) -> Result<Polytope> {
        if self.is_empty()? {
            return Err(PolytopeError::EmptySet);
        }
        let mut rows: Vec<(RowDVector<f64>, f64)> = Vec::with_capacity(self.n_rows());
        'outer: for (a, &b) in self.normals.row_iter().zip(self.offsets.iter()) {
            for (ka, kb) in rows.iter_mut() {
                if (a - &*ka).amax() <= 1e-12 {
                    if b < *kb {
                        *kb = b;
                    }
                    continue 'outer;
                }
            }
            rows.push((a.into_owned(), b));
        }

        let mut i = 0;
        while i < rows.len() {
            let m = rows.len();
            let mut h = DMatrix::zeros(m, self.dim);
            let mut g = DVector::zeros(m);
            for (k, (a, b)) in rows.iter().enumerate() {
                h.set_row(k, a);
                g[k] = *b;
            }
            // Relaxing the tested row keeps the LP bounded in its direction.
            g[i] += 1.0;
            let objective = -rows[i].0.transpose();
            let sol = solve_lp(&LinearProgram::new(objective, h, g))?;
            let redundant = match sol.status {
                LpStatus::Optimal => -sol.objective_value <= rows[i].1 + REDUNDANCY_TOL,
                LpStatus::Unbounded => false,
                LpStatus::Infeasible => return Err(PolytopeError::EmptySet),
            };
            if redundant {
                rows.remove(i);
            } else {
                i += 1;
            }
        }
        Ok(Self::from_unit_rows(self.dim, rows, false))
    }

    /// Center and radius of the largest inscribed Euclidean ball.
    pub fn chebyshev_center(&self) -> Result<(DVector<f64>, f64)> {
        if self.trivially_empty {
            return Err(PolytopeError::EmptySet);
        }
        let n = self.dim;
        let m = self.n_rows();
        let mut h = DMatrix::zeros(m, n + 1);
        h.view_mut((0, 0), (m, n)).copy_from(&self.normals);
        for i in 0..m {
            h[(i, n)] = 1.0;
        }
        let mut c = DVector::zeros(n + 1);
        c[n] = -1.0;
        let mut lower = vec![f64::NEG_INFINITY; n + 1];
        lower[n] = 0.0;
        let upper = vec![f64::INFINITY; n + 1];
        let lp = LinearProgram::new(c, h, self.offsets.clone()).with_bounds(lower, upper);
        let sol = solve_lp(&lp)?;
        match sol.status {
            LpStatus::Optimal => Ok((sol.primal.rows(0, n).into_owned(), sol.primal[n])),
            LpStatus::Infeasible => Err(PolytopeError::EmptySet),
            LpStatus::Unbounded => Err(PolytopeError::UnboundedDirection),
        }
    }

    /// Per-axis `(lower, upper)` extents.
    pub fn bounding_box(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut lo = Vec::with_capacity(self.dim);
        let mut hi = Vec::with_capacity(self.dim);
        for i in 0..self.dim {
            let mut e = DVector::zeros(self.dim);
            e[i] = 1.0;
            hi.push(self.support(&e)?);
            e[i] = -1.0;
            lo.push(-self.support(&e)?);
        }
        Ok((lo, hi))
    }

    /// Product of axis-aligned widths; a cheap size proxy.
    pub fn box_volume(&self) -> Result<f64> {
        let (lo, hi) = self.bounding_box()?;
        Ok(lo.iter().zip(&hi).map(|(l, h)| (h - l).max(0.0)).product())
    }

    /// Section through `point` keeping only the coordinates in `keep`.
    pub fn slice(&self, keep: &[usize], point: &DVector<f64>) -> Result<Polytope> {
        if point.len() != self.dim {
            return Err(PolytopeError::DimensionMismatch {
                expected: self.dim,
                found: point.len(),
            });
        }
        if let Some(&bad) = keep.iter().find(|&&i| i >= self.dim) {
            return Err(PolytopeError::DimensionMismatch {
                expected: self.dim,
                found: bad + 1,
            });
        }
        let mut fixed = point.clone();
        for &i in keep {
            fixed[i] = 0.0;
        }
        let normals = self.normals.select_columns(keep);
        let offsets = &self.offsets - &self.normals * fixed;
        Polytope::new(normals, offsets)
    }

    /// Vertices of a bounded 2-D polytope in counter-clockwise order.
    pub fn vertices_2d(&self) -> Result<Vec<[f64; 2]>> {
        if self.dim != 2 {
            return Err(PolytopeError::DimensionMismatch {
                expected: 2,
                found: self.dim,
            });
        }
        if self.is_empty()? {
            return Err(PolytopeError::EmptySet);
        }
        let reduced = self.reduce()?;
        let m = reduced.n_rows();
        let mut pts: Vec<[f64; 2]> = Vec::new();
        for i in 0..m {
            for j in i + 1..m {
                let (a1, a2) = (reduced.normals[(i, 0)], reduced.normals[(i, 1)]);
                let (b1, b2) = (reduced.normals[(j, 0)], reduced.normals[(j, 1)]);
                let det = a1 * b2 - a2 * b1;
                if det.abs() < 1e-12 {
                    continue;
                }
                let (ci, cj) = (reduced.offsets[i], reduced.offsets[j]);
                let x = DVector::from_vec(vec![(ci * b2 - a2 * cj) / det, (a1 * cj - ci * b1) / det]);
                if reduced.contains_point(&x, 1e-9)?
                    && !pts
                        .iter()
                        .any(|p| (p[0] - x[0]).abs() < 1e-9 && (p[1] - x[1]).abs() < 1e-9)
                {
                    pts.push([x[0], x[1]]);
                }
            }
        }
        if pts.is_empty() {
            // Either unbounded or a single point collapsed by reduction.
            return Err(PolytopeError::UnboundedDirection);
        }
        let cx = pts.iter().map(|p| p[0]).sum::<f64>() / pts.len() as f64;
        let cy = pts.iter().map(|p| p[1]).sum::<f64>() / pts.len() as f64;
        pts.sort_by(|p, q| {
            let ap = (p[1] - cy).atan2(p[0] - cx);
            let aq = (q[1] - cy).atan2(q[0] - cx);
            ap.total_cmp(&aq)
        });
        Ok(pts)
    }
}

/// Precomputed support-function evaluator for a fixed nonempty bounded polytope.
///
/// Boxes use the closed form and planar sets their vertex list; anything else
/// falls back to one LP per query.
#[derive(Debug, Clone)]
pub enum SupportOracle {
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Vertices(Vec<DVector<f64>>),
    Lp(Polytope),
}

impl SupportOracle {
    pub fn new(p: &Polytope) -> Result<Self> {
        if p.is_empty()? {
            return Err(PolytopeError::EmptySet);
        }
        if let Some((lower, upper)) = p.as_box() {
            return Ok(Self::Box { lower, upper });
        }
        if p.dim == 2 {
            if let Ok(v) = p.vertices_2d() {
                // Confirm boundedness: vertices of an unbounded region miss some support.
                let (lo, hi) = p.bounding_box()?;
                let covers = (0..2).all(|k| {
                    let vmax = v.iter().map(|q| q[k]).fold(f64::NEG_INFINITY, f64::max);
                    let vmin = v.iter().map(|q| q[k]).fold(f64::INFINITY, f64::min);
                    (vmax - hi[k]).abs() <= 1e-9 && (vmin - lo[k]).abs() <= 1e-9
                });
                if covers {
                    return Ok(Self::Vertices(
                        v.iter().map(|q| DVector::from_vec(q.to_vec())).collect(),
                    ));
                }
            }
        }
        p.bounding_box()?;
        Ok(Self::Lp(p.clone()))
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Box { lower, .. } => lower.len(),
            Self::Vertices(v) => v[0].len(),
            Self::Lp(p) => p.dim,
        }
    }

    pub fn support(&self, direction: &DVector<f64>) -> Result<f64> {
        if direction.len() != self.dim() {
            return Err(PolytopeError::DimensionMismatch {
                expected: self.dim(),
                found: direction.len(),
            });
        }
        match self {
            Self::Box { lower, upper } => Ok(direction
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(d, (l, u))| if *d >= 0.0 { d * u } else { d * l })
                .sum()),
            Self::Vertices(v) => Ok(v.iter().map(|q| q.dot(direction)).fold(f64::NEG_INFINITY, f64::max)),
            Self::Lp(p) => p.support(direction),
        }
    }
}

impl Polytope {
    /// Bounds of an axis-aligned box, if every row is `±eᵢ` and both sides of each axis appear.
    pub fn as_box(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        if self.trivially_empty {
            return None;
        }
        let mut lower = vec![f64::NEG_INFINITY; self.dim];
        let mut upper = vec![f64::INFINITY; self.dim];
        for (a, &b) in self.normals.row_iter().zip(self.offsets.iter()) {
            let mut axis = None;
            for (j, v) in a.iter().enumerate() {
                if v.abs() > 1e-14 {
                    if axis.is_some() {
                        return None;
                    }
                    axis = Some(j);
                }
            }
            let j = axis?;
            if (a[j] - 1.0).abs() <= 1e-14 {
                upper[j] = upper[j].min(b);
            } else if (a[j] + 1.0).abs() <= 1e-14 {
                lower[j] = lower[j].max(-b);
            } else {
                return None;
            }
        }
        if lower
            .iter()
            .zip(&upper)
            .all(|(l, u)| l.is_finite() && u.is_finite() && l <= u)
        {
            Some((lower, upper))
        } else {
            None
        }
    }
}

/// Maximal robust positive invariant subset of `state_constraints` for
/// `x⁺ = A_cl x + d` where `d` ranges over a set with support function
/// `disturbance_support`.
///
/// Runs `Ω₀ = X`, `Ωₖ₊₁ = Pre(Ωₖ) ∩ Ω₀` in the equivalent level form: level
/// `k` holds the rows `aᵢᵀA_clᵏ x ≤ bᵢ − Σ_{j<k} h(aᵢᵀA_clʲ)`. A level whose
/// rows are all implied by the rows kept so far is a fixed point.
/// `state_constraints` may be unbounded as long as the iteration bounds it.
pub fn max_rpi_set(
    a_cl: &DMatrix<f64>,
    disturbance_support: &mut dyn FnMut(&DVector<f64>) -> Result<f64>,
    state_constraints: &Polytope,
    max_iter: usize,
) -> Result<Polytope> {
    let n = state_constraints.dim();
    if a_cl.shape() != (n, n) {
        return Err(PolytopeError::DimensionMismatch {
            expected: n,
            found: a_cl.nrows(),
        });
    }
    if state_constraints.is_empty()? {
        return Err(PolytopeError::EmptySet);
    }
    let a_t = a_cl.transpose();
    let mut kept = state_constraints.clone();
    let mut frontier: Vec<(DVector<f64>, f64)> = state_constraints
        .normals
        .row_iter()
        .zip(state_constraints.offsets.iter())
        .map(|(a, &b)| (a.transpose(), b))
        .collect();

    for _ in 0..max_iter {
        let mut next = Vec::with_capacity(frontier.len());
        let mut added: Vec<(RowDVector<f64>, f64)> = Vec::new();
        for (dir, off) in &frontier {
            let shifted = off - disturbance_support(dir)?;
            let mapped = &a_t * dir;
            let norm = mapped.norm();
            if norm <= ZERO_ROW {
                if shifted < -ZERO_ROW {
                    return Err(PolytopeError::EmptySet);
                }
                continue;
            }
            let dir = mapped / norm;
            let off = shifted / norm;
            let implied = match kept.support(&dir) {
                Ok(s) => s <= off + REDUNDANCY_TOL,
                Err(PolytopeError::UnboundedDirection) => false,
                Err(e) => return Err(e),
            };
            if !implied {
                added.push((dir.transpose(), off));
            }
            next.push((dir, off));
        }
        if added.is_empty() {
            return kept.reduce();
        }
        let extra = Polytope::from_unit_rows(n, added, false);
        kept = kept.intersect(&extra)?;
        if kept.is_empty()? {
            return Err(PolytopeError::EmptySet);
        }
        if kept.n_rows() > 8 * state_constraints.n_rows() + 64 {
            kept = kept.reduce()?;
        }
        frontier = next;
    }
    Err(PolytopeError::NotConverged { iterations: max_iter })
}
