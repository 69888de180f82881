//! Finite-difference solver for `Δu = 4u²` with Dirichlet data on the
//! regions of a [`DomainChain`], plus the linear problems `Δw − c·w = −s`
//! used for potentials and Feynman–Kac oracles.
//!
//! The stencil is the symmetric cut-cell 5-point Laplacian: an arm that
//! crosses the boundary is shortened to the exact crossing, where the
//! boundary data is evaluated. Nodes closer to the boundary than
//! `theta_min·h` become Dirichlet nodes. Nodes outside the region keep the
//! data at their projection so that fields extend continuously past it.

use crate::field::{FieldDomain, Grid, ScalarField};
use crate::geometry::{BoundaryArc, DomainChain, GeometryError, Point, Region};
use faer::prelude::*;
use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};
use thiserror::Error;

const NONE: u32 = u32::MAX;

/// Boundary data seen by a stencil: evaluation point and the grid node it
/// stands for.
type BoundaryFn<'a> = dyn Fn(Point, usize) -> f64 + 'a;

/// `CutCell` is the production discretization. `NodeTrace` uses full arms
/// and takes data at the grid nodes just outside the region, which makes a
/// region's discrete problem an exact restriction of any larger one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum StencilKind {
    CutCell,
    NodeTrace,
}

#[derive(Debug, Error)]
pub enum PdeError {
    #[error("Newton did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("negative boundary data {value} at {point}")]
    NegativeBoundaryData { point: Point, value: f64 },
    #[error("non-finite boundary data at {point}")]
    NonFiniteBoundaryData { point: Point },
    #[error("negative coefficient {value} at {point}")]
    NegativeCoefficient { point: Point, value: f64 },
    #[error("linear solve failed: {0}")]
    LinearSolve(String),
    #[error("maximum principle violated at {point}: value {value}, bounds [0, {bound}]")]
    MaximumPrinciple { point: Point, value: f64, bound: f64 },
    #[error("field is on a different grid than the solver")]
    GridMismatch,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NewtonOptions {
    /// Relative residual target: `‖F‖∞ < tol·(1 + ‖u‖∞)`.
    pub tol: f64,
    pub max_iter: usize,
    /// Minimum cut fraction before a node is treated as lying on the boundary.
    pub theta_min: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 60,
            theta_min: 1e-2,
        }
    }
}

/// Convergence record of the last nonlinear solve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
    /// Residual history was nonincreasing after the first step.
    pub monotone: bool,
}

struct Stencil {
    offset: f64,
    /// Grid node of each unknown.
    nodes: Vec<usize>,
    /// Unknown index of each grid node, `NONE` for Dirichlet nodes.
    unknown_of: Vec<u32>,
    /// Interior neighbours, `NONE`-padded.
    nbrs: Vec<[u32; 4]>,
    /// Boundary arms: (unknown, coefficient of −Δ_h, evaluation point,
    /// neighbouring grid node).
    arms: Vec<(u32, f64, Point, usize)>,
    /// Diagonal of −Δ_h.
    diag: Vec<f64>,
    /// Dirichlet nodes with the point their value is taken from.
    fixed: Vec<(usize, Point)>,
    inv_h2: f64,
    symbolic: OnceLock<Result<SymbolicLlt<usize>, String>>,
}

impl Stencil {
    fn build(chain: &DomainChain, grid: &Grid, region: Region, kind: StencilKind, theta_min: f64) -> Result<Self, PdeError> {
        let offset = chain.offset(region);
        let shape = chain.shape();
        let h = grid.h;
        let inv_h2 = 1.0 / (h * h);
        let mut unknown_of = vec![NONE; grid.len()];
        let mut nodes = Vec::new();
        let mut fixed = Vec::new();
        for k in 0..grid.len() {
            let p = grid.point(k);
            let inside = match kind {
                StencilKind::CutCell => theta_min * h,
                StencilKind::NodeTrace => 0.0,
            };
            if shape.signed_distance(p, offset) > inside {
                unknown_of[k] = nodes.len() as u32;
                nodes.push(k);
            } else {
                fixed.push((k, shape.project(p, offset)));
            }
        }
        let mut nbrs = vec![[NONE; 4]; nodes.len()];
        let mut arms = Vec::new();
        let mut diag = vec![0.0; nodes.len()];
        for (u, &k) in nodes.iter().enumerate() {
            let (i, j) = grid.coords(k);
            let p = grid.point(k);
            // Unknowns sit at least theta_min·h inside, so all four neighbours exist.
            let around = [
                grid.index(i + 1, j),
                grid.index(i - 1, j),
                grid.index(i, j + 1),
                grid.index(i, j - 1),
            ];
            for (slot, &q) in around.iter().enumerate() {
                let qp = grid.point(q);
                let other = unknown_of[q];
                if other != NONE {
                    nbrs[u][slot] = other;
                    diag[u] += inv_h2;
                    continue;
                }
                let (arm, at) = if kind == StencilKind::NodeTrace {
                    (h, qp)
                } else if shape.signed_distance(qp, offset) > 0.0 {
                    // a snapped node: data at its projection, full arm
                    (h, shape.project(qp, offset))
                } else {
                    match shape.first_exit(p, qp, offset)? {
                        Some((t, x)) => ((t * h).max(theta_min * h), x),
                        None => (h, shape.project(qp, offset)),
                    }
                };
                let c = 1.0 / (h * arm);
                diag[u] += c;
                arms.push((u as u32, c, at, q));
            }
        }
        Ok(Self {
            offset,
            nodes,
            unknown_of,
            nbrs,
            arms,
            diag,
            fixed,
            inv_h2,
            symbolic: OnceLock::new(),
        })
    }

    fn len(&self) -> usize {
        self.nodes.len()
    }

    /// `y = (−Δ_h restricted to unknowns) x`.
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for u in 0..self.len() {
            let mut acc = self.diag[u] * x[u];
            for &nb in &self.nbrs[u] {
                if nb != NONE {
                    acc -= self.inv_h2 * x[nb as usize];
                }
            }
            y[u] = acc;
        }
    }

    /// Matrix `−Δ_h + diag(shift)`, lower triangle.
    fn matrix(&self, shift: &[f64]) -> Result<SparseColMat<usize, f64>, PdeError> {
        let mut triplets = Vec::with_capacity(3 * self.len());
        for u in 0..self.len() {
            triplets.push(Triplet::new(u, u, self.diag[u] + shift[u]));
            for &nb in &self.nbrs[u] {
                if nb != NONE && (nb as usize) > u {
                    triplets.push(Triplet::new(nb as usize, u, -self.inv_h2));
                }
            }
        }
        SparseColMat::try_new_from_triplets(self.len(), self.len(), &triplets)
            .map_err(|e| PdeError::LinearSolve(format!("{e:?}")))
    }

    fn solve(&self, shift: &[f64], rhs: &[f64]) -> Result<Vec<f64>, PdeError> {
        let a = self.matrix(shift)?;
        let symbolic = self
            .symbolic
            .get_or_init(|| SymbolicLlt::try_new(a.symbolic(), Side::Lower).map_err(|e| format!("{e:?}")))
            .clone()
            .map_err(PdeError::LinearSolve)?;
        let llt = Llt::try_new_with_symbolic(symbolic, a.as_ref(), Side::Lower)
            .map_err(|e| PdeError::LinearSolve(format!("{e:?}")))?;
        let b = Mat::<f64>::from_fn(self.len(), 1, |i, _| rhs[i]);
        let x = llt.solve(&b);
        let out: Vec<f64> = (0..self.len()).map(|i| x[(i, 0)]).collect();
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(PdeError::LinearSolve("non-finite solution".into()))
        }
    }

    /// Boundary contribution `r` with `Δ_h u = −A u + r`, and the largest datum.
    fn boundary_rhs(&self, data: &BoundaryFn, check_sign: bool) -> Result<(Vec<f64>, f64), PdeError> {
        let mut r = vec![0.0; self.len()];
        let mut max = 0.0f64;
        for &(u, c, at, q) in &self.arms {
            let value = checked(data, at, q, check_sign)?;
            max = max.max(value);
            r[u as usize] += c * value;
        }
        for &(k, at) in &self.fixed {
            max = max.max(checked(data, at, k, check_sign)?);
        }
        Ok((r, max))
    }

    fn to_field(
        &self,
        grid: &Grid,
        domain: FieldDomain,
        interior: &[f64],
        data: &BoundaryFn,
        label: String,
    ) -> ScalarField {
        let mut values = vec![0.0; grid.len()];
        for (u, &k) in self.nodes.iter().enumerate() {
            values[k] = interior[u];
        }
        for &(k, at) in &self.fixed {
            values[k] = data(at, k);
        }
        ScalarField::from_values(grid.clone(), values, domain, label)
    }
}

fn checked(data: &BoundaryFn, at: Point, node: usize, check_sign: bool) -> Result<f64, PdeError> {
    let v = data(at, node);
    if !v.is_finite() {
        return Err(PdeError::NonFiniteBoundaryData { point: at });
    }
    if check_sign && v < 0.0 {
        return Err(PdeError::NegativeBoundaryData { point: at, value: v });
    }
    Ok(v)
}

fn sup_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Solver bound to one chain and one grid; every field it returns lives on
/// that grid, so fields from different regions combine node-wise.
pub struct PdeSolver {
    chain: DomainChain,
    grid: Grid,
    options: NewtonOptions,
    stencils: Mutex<HashMap<(Region, StencilKind), Arc<Stencil>>>,
    last: Mutex<SolveStats>,
}

impl PdeSolver {
    pub fn new(chain: DomainChain, h: f64, options: NewtonOptions) -> Self {
        let grid = Grid::covering(chain.shape(), h);
        Self {
            chain,
            grid,
            options,
            stencils: Mutex::new(HashMap::new()),
            last: Mutex::new(SolveStats::default()),
        }
    }

    pub fn chain(&self) -> &DomainChain {
        &self.chain
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn options(&self) -> &NewtonOptions {
        &self.options
    }

    pub fn last_stats(&self) -> SolveStats {
        *self.last.lock().unwrap()
    }

    fn stencil(&self, region: Region) -> Result<Arc<Stencil>, PdeError> {
        self.stencil_of(region, StencilKind::CutCell)
    }

    fn stencil_of(&self, region: Region, kind: StencilKind) -> Result<Arc<Stencil>, PdeError> {
        self.chain.check_region(region)?;
        let key = (region, kind);
        if let Some(s) = self.stencils.lock().unwrap().get(&key) {
            return Ok(s.clone());
        }
        // Built outside the lock; a concurrent duplicate build is harmless.
        let s = Arc::new(Stencil::build(&self.chain, &self.grid, region, kind, self.options.theta_min)?);
        Ok(self.stencils.lock().unwrap().entry(key).or_insert(s).clone())
    }

    pub fn domain(&self, region: Region) -> FieldDomain {
        FieldDomain {
            shape: self.chain.shape().clone(),
            offset: self.chain.offset(region),
        }
    }

    /// Whether grid node `k` is an unknown of the region's discrete problem.
    pub fn is_interior_node(&self, region: Region, k: usize) -> Result<bool, PdeError> {
        Ok(self.stencil(region)?.unknown_of[k] != NONE)
    }

    pub fn zero(&self, region: Region) -> ScalarField {
        ScalarField::constant(self.grid.clone(), self.domain(region), 0.0).with_label("zero")
    }

    /// Nonnegative solution of `Δ_h w = 4w²` in `region` with `w = data` on its
    /// boundary. Damped Newton from the harmonic extension.
    pub fn solve_dirichlet(&self, region: Region, data: &dyn Fn(Point) -> f64) -> Result<ScalarField, PdeError> {
        let st = self.stencil(region)?;
        self.newton(region, &st, &|p, _| data(p))
    }

    /// Like [`solve_dirichlet`](Self::solve_dirichlet) but with the data
    /// given as the node values of `outer` on the discrete boundary ring of
    /// `region`.
    pub fn solve_dirichlet_trace(&self, region: Region, outer: &ScalarField) -> Result<ScalarField, PdeError> {
        if outer.grid() != &self.grid {
            return Err(PdeError::GridMismatch);
        }
        let st = self.stencil_of(region, StencilKind::NodeTrace)?;
        let values = outer.values();
        self.newton(region, &st, &|_, k| values[k])
    }

    fn newton(&self, region: Region, st: &Stencil, data: &BoundaryFn) -> Result<ScalarField, PdeError> {
        let (r, bound) = st.boundary_rhs(data, true)?;
        let n = st.len();
        let mut u = st.solve(&vec![0.0; n], &r)?;
        for x in u.iter_mut() {
            *x = x.max(0.0);
        }
        let residual = |u: &[f64], f: &mut [f64]| {
            st.apply(u, f);
            for i in 0..n {
                f[i] = r[i] - f[i] - 4.0 * u[i] * u[i];
            }
            sup_norm(f)
        };
        let mut f = vec![0.0; n];
        let mut res = residual(&u, &mut f);
        let mut history = vec![res];
        let mut iterations = 0;
        while res >= self.options.tol * (1.0 + sup_norm(&u)) {
            if iterations == self.options.max_iter {
                return Err(PdeError::NonConvergence { iterations, residual: res });
            }
            iterations += 1;
            let shift: Vec<f64> = u.iter().map(|&x| 8.0 * x).collect();
            let delta = st.solve(&shift, &f)?;
            let mut step = 1.0;
            let mut trial = vec![0.0; n];
            let mut f_trial = vec![0.0; n];
            loop {
                for i in 0..n {
                    trial[i] = (u[i] + step * delta[i]).max(0.0);
                }
                let r_trial = residual(&trial, &mut f_trial);
                if r_trial < res || step < 1e-4 {
                    u.copy_from_slice(&trial);
                    f.copy_from_slice(&f_trial);
                    res = r_trial;
                    break;
                }
                step *= 0.5;
            }
            history.push(res);
            if !res.is_finite() {
                return Err(PdeError::NonConvergence { iterations, residual: res });
            }
        }
        let monotone = history.windows(2).skip(1).all(|w| w[1] <= w[0]);
        *self.last.lock().unwrap() = SolveStats {
            iterations,
            residual: res,
            monotone,
        };
        let tol = 1e-9 * (1.0 + bound);
        for (i, &x) in u.iter().enumerate() {
            if x < -tol || x > bound + tol {
                return Err(PdeError::MaximumPrinciple {
                    point: self.grid.point(st.nodes[i]),
                    value: x,
                    bound,
                });
            }
        }
        Ok(st.to_field(&self.grid, self.domain(region), &u, data, format!("w[{region}]")))
    }

    /// Dirichlet data `cap` on the union of `arcs` (by polar angle about the
    /// shape's center), 0 elsewhere.
    pub fn solve_blowup(&self, region: Region, arcs: &[BoundaryArc], cap: f64) -> Result<ScalarField, PdeError> {
        let center = self.chain.shape().center();
        let data = arc_indicator(arcs, cap, center);
        let f = self.solve_dirichlet(region, &data)?;
        Ok(f.with_label(format!("blowup[{region}, M={cap}]")))
    }

    /// Solves `Δ_h w − c·w = −s` in `region`, `w = data` on the boundary, with
    /// `c, s` given as fields on the solver grid. Requires `c ≥ 0`.
    pub fn solve_linear(
        &self,
        region: Region,
        c: &ScalarField,
        s: &ScalarField,
        data: &dyn Fn(Point) -> f64,
    ) -> Result<ScalarField, PdeError> {
        if c.grid() != &self.grid || s.grid() != &self.grid {
            return Err(PdeError::GridMismatch);
        }
        let st = self.stencil(region)?;
        let (mut r, _) = st.boundary_rhs(&|p, _| data(p), false)?;
        let mut shift = vec![0.0; st.len()];
        for (u, &k) in st.nodes.iter().enumerate() {
            let ck = c.values()[k];
            if ck < 0.0 {
                return Err(PdeError::NegativeCoefficient {
                    point: self.grid.point(k),
                    value: ck,
                });
            }
            shift[u] = ck;
            r[u] += s.values()[k];
        }
        let w = st.solve(&shift, &r)?;
        Ok(st.to_field(&self.grid, self.domain(region), &w, &|p, _| data(p), format!("linear[{region}]")))
    }

    /// `U^{4g} f` on `D`: solves `½Δw − 4g·w = −f`, `w = 0` on `∂D`.
    pub fn potential_operator(&self, kill: &ScalarField, source: &ScalarField) -> Result<ScalarField, PdeError> {
        let c = kill.map("8g", |g| 8.0 * g);
        let s = source.map("2f", |f| 2.0 * f);
        for (k, &v) in source.values().iter().enumerate() {
            if v < 0.0 {
                return Err(PdeError::NegativeCoefficient {
                    point: self.grid.point(k),
                    value: v,
                });
            }
        }
        let w = self.solve_linear(Region::Full, &c, &s, &|_| 0.0)?;
        Ok(w.with_label("potential"))
    }

    /// `‖Δ_h w − 4w²‖∞` over the region's unknowns.
    pub fn semilinear_residual(&self, region: Region, w: &ScalarField, data: &dyn Fn(Point) -> f64) -> Result<f64, PdeError> {
        self.operator_residual(region, w, data, |_, x| 4.0 * x * x)
    }

    /// `‖Δ_h w − c·w + s‖∞` over the region's unknowns.
    pub fn linear_residual(
        &self,
        region: Region,
        w: &ScalarField,
        c: &ScalarField,
        s: &ScalarField,
        data: &dyn Fn(Point) -> f64,
    ) -> Result<f64, PdeError> {
        if c.grid() != &self.grid || s.grid() != &self.grid {
            return Err(PdeError::GridMismatch);
        }
        let (cv, sv) = (c.values(), s.values());
        self.operator_residual(region, w, data, |k, x| cv[k] * x - sv[k])
    }

    /// `‖Δ_h w − reaction(node, w)‖∞` over the region's unknowns.
    fn operator_residual(
        &self,
        region: Region,
        w: &ScalarField,
        data: &dyn Fn(Point) -> f64,
        reaction: impl Fn(usize, f64) -> f64,
    ) -> Result<f64, PdeError> {
        if w.grid() != &self.grid {
            return Err(PdeError::GridMismatch);
        }
        let st = self.stencil(region)?;
        let (r, _) = st.boundary_rhs(&|p, _| data(p), false)?;
        let x: Vec<f64> = st.nodes.iter().map(|&k| w.values()[k]).collect();
        let mut y = vec![0.0; st.len()];
        st.apply(&x, &mut y);
        let mut worst = 0.0f64;
        for (i, &k) in st.nodes.iter().enumerate() {
            worst = worst.max((r[i] - y[i] - reaction(k, x[i])).abs());
        }
        Ok(worst)
    }

    /// Tower check: solve on `D_k` with `data`, then on `D_j` with the
    /// discrete trace of that solution; returns the sup difference on `D_j`.
    /// Agreement is exact up to the Newton tolerance.
    pub fn markov_nesting_check(&self, data: &dyn Fn(Point) -> f64, j: usize, k: usize) -> Result<f64, PdeError> {
        assert!(j < k, "nesting check needs j < k");
        let outer = self.solve_dirichlet(Region::Sub(k), data)?;
        let inner = self.solve_dirichlet_trace(Region::Sub(j), &outer)?;
        let st = self.stencil_of(Region::Sub(j), StencilKind::NodeTrace)?;
        Ok(sup_difference(&st.nodes, &outer, &inner))
    }

    /// Same comparison with the `D_j` problem posed on its true boundary,
    /// data interpolated from the `D_k` solution. Differs by the O(h²)
    /// discretization error of the two solves.
    pub fn markov_nesting_gap(&self, data: &dyn Fn(Point) -> f64, j: usize, k: usize) -> Result<f64, PdeError> {
        assert!(j < k, "nesting check needs j < k");
        let outer = self.solve_dirichlet(Region::Sub(k), data)?;
        let inner = self.solve_dirichlet(Region::Sub(j), &|p| outer.at_cubic(p))?;
        let st = self.stencil(Region::Sub(j))?;
        Ok(sup_difference(&st.nodes, &outer, &inner))
    }

    /// Offset of the region a stencil was built for (diagnostics).
    pub fn region_offset(&self, region: Region) -> Result<f64, PdeError> {
        Ok(self.stencil(region)?.offset)
    }
}

fn sup_difference(nodes: &[usize], a: &ScalarField, b: &ScalarField) -> f64 {
    nodes
        .iter()
        .map(|&n| (a.values()[n] - b.values()[n]).abs())
        .fold(0.0, f64::max)
}

/// `cap · 1{direction of p ∈ ∪ arcs}`.
pub fn arc_indicator(arcs: &[BoundaryArc], cap: f64, center: Point) -> impl Fn(Point) -> f64 + '_ {
    move |p| {
        if arcs.iter().any(|a| a.contains_direction(center, p)) {
            cap
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_chain, Shape};
    use approx::assert_abs_diff_eq;

    fn disk_solver(h: f64, depth: usize) -> PdeSolver {
        let chain = build_chain(Shape::unit_disk(), depth, 1.0, Point::ORIGIN).unwrap();
        PdeSolver::new(chain, h, NewtonOptions::default())
    }

    /// Radial profile of `w'' + w'/r = 4w²` with `w(1) = boundary`, by
    /// shooting on `w(0)` with RK4. Returns `w(0)`.
    pub(crate) fn radial_shooting(boundary: f64) -> f64 {
        let end_value = |a: f64| {
            // series start: w ≈ a + a² r²
            let r0 = 1e-4;
            let mut r = r0;
            let mut y = [a + a * a * r0 * r0, 2.0 * a * a * r0];
            let steps = 20_000;
            let dr = (1.0 - r0) / steps as f64;
            let rhs = |r: f64, y: [f64; 2]| [y[1], 4.0 * y[0] * y[0] - y[1] / r];
            for _ in 0..steps {
                let k1 = rhs(r, y);
                let k2 = rhs(r + dr / 2.0, [y[0] + dr / 2.0 * k1[0], y[1] + dr / 2.0 * k1[1]]);
                let k3 = rhs(r + dr / 2.0, [y[0] + dr / 2.0 * k2[0], y[1] + dr / 2.0 * k2[1]]);
                let k4 = rhs(r + dr, [y[0] + dr * k3[0], y[1] + dr * k3[1]]);
                y[0] += dr / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]);
                y[1] += dr / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]);
                r += dr;
            }
            y[0]
        };
        let (mut lo, mut hi) = (0.0, boundary);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if end_value(mid) < boundary {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn zero_data_gives_zero() {
        let s = disk_solver(0.05, 2);
        let w = s.solve_dirichlet(Region::Full, &|_| 0.0).unwrap();
        assert_eq!(w.max(), 0.0);
        assert_eq!(w.min(), 0.0);
    }

    #[test]
    fn negative_data_rejected() {
        let s = disk_solver(0.1, 1);
        assert!(matches!(
            s.solve_dirichlet(Region::Full, &|p| p.x),
            Err(PdeError::NegativeBoundaryData { .. })
        ));
    }

    #[test]
    fn radial_solution_matches_shooting() {
        let oracle = radial_shooting(1.0);
        assert!(oracle > 0.0 && oracle < 1.0);
        let s = disk_solver(1.0 / 128.0, 1);
        let w = s.solve_dirichlet(Region::Full, &|_| 1.0).unwrap();
        let stats = s.last_stats();
        assert!(stats.residual < 1e-8 * (1.0 + w.max()));
        assert!(stats.monotone);
        assert_abs_diff_eq!(w.at(Point::ORIGIN), oracle, epsilon = 1e-4);
    }

    #[test]
    fn second_order_under_refinement() {
        let oracle = radial_shooting(2.0);
        let errs: Vec<f64> = [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0]
            .iter()
            .map(|&h| {
                let s = disk_solver(h, 1);
                let w = s.solve_dirichlet(Region::Full, &|_| 2.0).unwrap();
                (w.at(Point::ORIGIN) - oracle).abs()
            })
            .collect();
        // cut-cell error is not perfectly smooth in h; ask for clearly better than first order
        assert!(errs[2] < errs[0] / 6.0, "errors {errs:?}");
    }

    #[test]
    fn potential_of_unit_source_on_disk() {
        let s = disk_solver(1.0 / 64.0, 1);
        let zero = s.zero(Region::Full);
        let one = zero.map("one", |_| 1.0);
        let w = s.potential_operator(&zero, &one).unwrap();
        for p in [Point::ORIGIN, Point::new(0.3, -0.4), Point::new(0.6, 0.6)] {
            assert_abs_diff_eq!(w.at(p), (1.0 - p.norm_sq()) / 2.0, epsilon = 1e-4);
        }
        let zf = s.potential_operator(&zero, &zero).unwrap();
        assert_eq!(zf.max(), 0.0);
        // ½Δw − 4g w + f = 0  ⇔  Δw − 8g w + 2f = 0
        let c = zero.map("8g", |g| 8.0 * g);
        let two = one.map("2f", |f| 2.0 * f);
        let res = s.linear_residual(Region::Full, &w, &c, &two, &|_| 0.0).unwrap();
        assert!(res < 1e-8, "residual {res}");
    }

    #[test]
    fn blowup_monotone_and_saturating() {
        let s = disk_solver(1.0 / 32.0, 1);
        let arcs = [BoundaryArc::new(0.0, std::f64::consts::FRAC_PI_2)];
        let x0 = Point::new(0.1, 0.1);
        let g: Vec<ScalarField> = [0.0, 20.0, 40.0, 80.0]
            .iter()
            .map(|&m| s.solve_blowup(Region::Full, &arcs, m).unwrap())
            .collect();
        assert_eq!(g[0].max(), 0.0);
        for (a, b) in g[1].values().iter().zip(g[2].values()) {
            assert!(a <= b);
        }
        let d1 = g[2].at(x0) - g[1].at(x0);
        let d2 = g[3].at(x0) - g[2].at(x0);
        assert!(d2 < d1, "no saturation: {d1} then {d2}");
    }

    #[test]
    fn nesting_of_constant_data() {
        let s = disk_solver(1.0 / 64.0, 3);
        assert_eq!(s.markov_nesting_check(&|_| 0.0, 1, 3).unwrap(), 0.0);
        let r = s.markov_nesting_check(&|_| 1.0, 1, 3).unwrap();
        assert!(r < 1e-6, "nesting residual {r}");
    }

    #[test]
    fn nesting_of_global_solution() {
        // data = g|∂D_k with g solved on D: the D_k solve reproduces g there
        let s = disk_solver(1.0 / 64.0, 3);
        let g = s.solve_dirichlet(Region::Full, &|p| 1.0 + 0.5 * p.x).unwrap();
        let r = s.markov_nesting_check(&|p| g.at_cubic(p), 1, 3).unwrap();
        assert!(r < 1e-6 * (1.0 + g.max()), "nesting residual {r}");
        let st = s.stencil_of(Region::Sub(2), StencilKind::NodeTrace).unwrap();
        let restricted = s.solve_dirichlet_trace(Region::Sub(2), &g).unwrap();
        assert!(sup_difference(&st.nodes, &g, &restricted) < 1e-6);
    }

    #[test]
    fn interpolated_nesting_gap_is_second_order() {
        let gaps: Vec<f64> = [1.0 / 32.0, 1.0 / 64.0]
            .iter()
            .map(|&h| disk_solver(h, 3).markov_nesting_gap(&|_| 1.0, 1, 3).unwrap())
            .collect();
        assert!(gaps[1] < gaps[0] / 3.0, "gaps {gaps:?}");
    }

    #[test]
    fn comparison_principle_on_random_data() {
        use rand::{Rng, SeedableRng};
        let s = disk_solver(1.0 / 32.0, 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let a: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..2.0));
            let bump: f64 = rng.random_range(0.0..1.0);
            let low = move |p: Point| a[0] + a[1] * (1.0 + p.x) * 0.5 + a[2] * (p.y * a[3]).sin().abs();
            let high = move |p: Point| low(p) + bump * (1.0 + p.y) * 0.5;
            let wl = s.solve_dirichlet(Region::Sub(2), &low).unwrap();
            let wh = s.solve_dirichlet(Region::Sub(2), &high).unwrap();
            assert!(wl.values().iter().zip(wh.values()).all(|(l, h)| *l <= *h + 1e-12));
            assert!(wl.min() >= 0.0);
        }
    }
}
