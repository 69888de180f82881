//! Mass immigrating along a backbone tree, and the deterministic left-hand
//! sides of the transform identities.
//!
//! Given the pruned tree, the immigrated exit measure `Y^k` is Poisson with
//! intensity `4·Ñ_y` along the lines, where `Ñ_y = N_y(· e^{−⟨X^k, κ⟩})` and
//! `κ` is the kill field. Its conditional Laplace functional is
//! `exp(−∫ 4(w_{φ+κ} − κ) ds)` summed over lines.
//!
//! Particle realization: one cluster of mass `1/n` started along a line
//! has `n(1 − q)` solving `½Δz = 2z² + k z` when its particles die at rate
//! `k`; matching `z = w_{φ+κ} − κ` needs `k = 4κ`, and matching the Poisson
//! exponent needs seeds at rate `4n` per unit line time.

use crate::backbone::{BackboneTree, TaggedFields, TransformFields};
use crate::diffusion::StepControl;
use crate::field::ScalarField;
use crate::geometry::{Point, Region};
use crate::pde::{PdeError, PdeSolver};
use crate::rng::SimRng;
use crate::superprocess::{run_cluster, ExitMeasure, RunFlag, SbmParams, Seed};
use rand_distr::{Distribution, Exp1};
use sha2::{Digest, Sha256};
use std::cell::Cell;
use std::collections::HashMap;
use std::sync::{Arc, RwLock};
use thiserror::Error;

/// Allowed undershoot of `w_{φ+κ}` below `κ`.
pub const SHIFT_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ImmigrationError {
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error("shifted solution lies {deficit} below the kill field at {point}")]
    ComparisonViolated { point: Point, deficit: f64 },
    #[error("h-function vanishes at the evaluation point ({0})")]
    ZeroNormalizer(f64),
}

/// A tree together with the kill field of the mass thrown off along it and
/// the level at which it is pruned.
#[derive(Clone, Copy)]
pub struct ImmigrationPlan<'a> {
    pub tree: &'a BackboneTree,
    pub kill: &'a ScalarField,
    pub level: usize,
}

/// `exp(−Σ_lines ∫ 4(w_shift − kill) ds)` over the pruned tree, where
/// `w_shift` solves the PDE on `D_level` with data `φ + kill`. Passing the
/// kill field re-solved on `D_level` (see [`shifted_solution`]) makes the
/// integrand vanish identically at `φ = 0`.
pub fn laplace_semi_analytic(plan: &ImmigrationPlan, w_shift: &ScalarField) -> Result<f64, ImmigrationError> {
    let worst: Cell<Option<(Point, f64)>> = Cell::new(None);
    let integral = plan.tree.integral(plan.level, |p| {
        let d = w_shift.at(p) - plan.kill.at(p);
        if d < -SHIFT_TOL && worst.get().map_or(true, |(_, w)| d < w) {
            worst.set(Some((p, d)));
        }
        d.max(0.0)
    });
    if let Some((point, d)) = worst.get() {
        return Err(ImmigrationError::ComparisonViolated { point, deficit: -d });
    }
    Ok((-4.0 * integral).exp())
}

/// Realization of `Y^k` given the tree: seeds at rate `4n` along the
/// pruned lines, each a cluster of the particle system whose particles die
/// at rate `4·kill`.
pub fn realize_y(
    solver: &PdeSolver,
    plan: &ImmigrationPlan,
    params: &SbmParams,
    rng: &mut SimRng,
) -> (ExitMeasure, Option<RunFlag>) {
    let chain = solver.chain();
    let rate = 4.0 * params.n as f64;
    let mut seeds = Vec::new();
    for node in plan.tree.pruned_nodes(plan.level) {
        let stop = node.exit_time(plan.level).unwrap_or(f64::INFINITY);
        let mut level = node.birth_level;
        let mut crossings = node.path.crossings.iter().peekable();
        let mut next: f64 = Exp1.sample(rng);
        let mut clock = 0.0;
        for w in node.path.vertices.windows(2) {
            if w[0].t >= stop {
                break;
            }
            let dt = w[1].t.min(stop) - w[0].t;
            while crossings.peek().is_some_and(|c| c.time <= w[0].t) {
                level = crossings.next().expect("peeked").level + 1;
            }
            clock += rate * dt;
            while next <= clock {
                seeds.push(Seed {
                    point: w[0].p,
                    time: w[0].t,
                    level,
                });
                let e: f64 = Exp1.sample(rng);
                next += e;
            }
        }
    }
    let kill = |p: Point| 4.0 * plan.kill.at(p).max(0.0);
    let run = run_cluster(chain, &seeds, plan.level, params, Some(&kill), rng);
    (run.measure(plan.level).clone(), run.flag)
}

/// Particle settings for the clusters in [`realize_y`].
pub fn cluster_params(n: usize, step: StepControl) -> SbmParams {
    SbmParams {
        n,
        step,
        ..SbmParams::default()
    }
}

/// Solution on `region` with boundary data `φ + base` on `∂region`. With
/// `φ = 0` this is `base` re-solved on `region`, which agrees with `base` up
/// to discretization error; pair the two when an exact `φ = 0` baseline is
/// needed.
pub fn shifted_solution(
    solver: &PdeSolver,
    region: Region,
    phi: &dyn Fn(Point) -> f64,
    base: &ScalarField,
) -> Result<ScalarField, PdeError> {
    solver.solve_dirichlet(region, &|p| base.at(p) + phi(p))
}

/// Memo of shifted solutions keyed by a content hash of (region, test
/// function key, base field values).
#[derive(Default)]
pub struct FieldCache {
    map: RwLock<HashMap<[u8; 32], Arc<ScalarField>>>,
}

impl FieldCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn key(region: Region, phi_key: &str, base: &ScalarField) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(format!("{region:?}|{phi_key}|").as_bytes());
        for v in base.values() {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }

    pub fn len(&self) -> usize {
        self.map.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cached [`shifted_solution`]; `phi_key` must identify `φ`.
    pub fn shifted(
        &self,
        solver: &PdeSolver,
        region: Region,
        phi_key: &str,
        phi: &dyn Fn(Point) -> f64,
        base: &ScalarField,
    ) -> Result<Arc<ScalarField>, PdeError> {
        let key = Self::key(region, phi_key, base);
        if let Some(f) = self.map.read().unwrap().get(&key) {
            return Ok(f.clone());
        }
        let f = Arc::new(shifted_solution(solver, region, phi, base)?);
        Ok(self.map.write().unwrap().entry(key).or_insert(f).clone())
    }
}

/// `M̂_x(e^{−⟨X^k,φ⟩}) = (w_{φ+g}(x) − w_{φ+u}(x)) / v(x)`, with the
/// normalizer `v(x)` taken from the same solves at `φ = 0`.
pub fn mhat_lhs(
    solver: &PdeSolver,
    x: Point,
    phi: &dyn Fn(Point) -> f64,
    region: Region,
    fields: &TransformFields,
) -> Result<f64, ImmigrationError> {
    let diff = |phi: &dyn Fn(Point) -> f64| -> Result<f64, PdeError> {
        let wg = shifted_solution(solver, region, phi, &fields.g)?;
        let wu = shifted_solution(solver, region, phi, &fields.u)?;
        Ok(wg.at(x) - wu.at(x))
    };
    let v = diff(&|_| 0.0)?;
    if !(v > 0.0) {
        return Err(ImmigrationError::ZeroNormalizer(v));
    }
    Ok(diff(phi)? / v)
}

/// `M̌_x(e^{−⟨X^k,φ⟩}) = −Σ_{A⊆N} (−1)^{|A|} w_{φ+u^A}(x) / v_N(x)`, with
/// `u^∅ = 0` and `v_N(x)` from the same sum at `φ = 0`.
pub fn mcheck_lhs(
    solver: &PdeSolver,
    x: Point,
    phi: &dyn Fn(Point) -> f64,
    region: Region,
    fields: &TaggedFields,
) -> Result<f64, ImmigrationError> {
    let zero = solver.zero(Region::Full);
    let alt = |phi: &dyn Fn(Point) -> f64| -> Result<f64, PdeError> {
        let mut sum = shifted_solution(solver, region, phi, &zero)?.at(x);
        for (a, u) in fields.u.iter() {
            sum += a.sign() as f64 * shifted_solution(solver, region, phi, u)?.at(x);
        }
        Ok(-sum)
    };
    let v = alt(&|_| 0.0)?;
    if !(v > 0.0) {
        return Err(ImmigrationError::ZeroNormalizer(v));
    }
    Ok(alt(phi)? / v)
}
