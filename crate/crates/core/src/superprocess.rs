//! Branching-particle approximation of super-Brownian motion and of its exit
//! measures on the chain, with estimators for the log-Laplace functionals.
//!
//! `n` particles of mass `1/n` start at `x`; each moves as a Brownian motion,
//! branches critically (0 or 2 offspring) at rate `β·n`, and is optionally
//! killed at a spatial rate. A particle's mass is frozen into `X^k` where its
//! line of descent first leaves `D_k`.
//!
//! With `½Δ` as generator, one particle's non-absorption probability `q`
//! satisfies `½Δq + (βn/2)(1 − q)² = 0`, so `n(1 − q)` solves
//! `½Δw = (β/2)w²`. Matching `Δw = 4w²` gives `β = 4`.

use crate::diffusion::{advance, EventKind, Leg, Motion, StepControl, Terminal};
use crate::field::ScalarField;
use crate::geometry::{BoundaryArc, DomainChain, GeometryError, Point, Region};
use crate::pde::{PdeError, PdeSolver};
use crate::rng::{replicate, SimRng};
use crate::stats::{jackknife, EstimatorResult, Summary};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

/// Branch-rate constant matching `Δu = 4u²`.
pub const DEFAULT_BETA: f64 = 4.0;

#[derive(Debug, Error)]
pub enum SuperprocessError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error("resolution must be at least 1")]
    BadResolution,
    #[error("branch rate constant must be positive and finite, got {0}")]
    BadBeta(f64),
    #[error("test function is negative or non-finite ({value}) at {point}")]
    BadTestFunction { point: Point, value: f64 },
    #[error("test function {value} exceeds the resolution {n}; use the log inversion")]
    TestFunctionTooLarge { value: f64, n: usize },
    #[error("every replica was discarded")]
    NoValidReplicas,
    #[error("laplace functional mean {0} is not in (0, 1]")]
    DegenerateMean(f64),
    #[error("exponential moment diverged at lambda = {0}")]
    Diverged(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub point: Point,
    pub mass: f64,
}

/// Finite atomic measure on `∂D_level`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExitMeasure {
    pub level: usize,
    pub atoms: Vec<Atom>,
}

impl ExitMeasure {
    pub fn new(level: usize) -> Self {
        Self { level, atoms: Vec::new() }
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.mass).sum()
    }

    /// `⟨X, φ⟩`.
    pub fn integrate(&self, f: impl Fn(Point) -> f64) -> f64 {
        self.atoms.iter().map(|a| a.mass * f(a.point)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn merge(&mut self, other: &ExitMeasure) {
        self.atoms.extend_from_slice(&other.atoms);
    }

    /// Largest distance of an atom from `∂D_level`.
    pub fn boundary_defect(&self, chain: &DomainChain) -> f64 {
        let region = chain.region_at(self.level);
        self.atoms
            .iter()
            .map(|a| chain.signed_distance(region, a.point).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(measures: &[ExitMeasure], mut out: W) -> std::io::Result<()> {
        writeln!(out, "k,x,y,mass")?;
        for m in measures {
            for a in &m.atoms {
                writeln!(out, "{},{},{},{}", m.level, a.point.x, a.point.y, a.mass)?;
            }
        }
        Ok(())
    }
}

/// Particle-system settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SbmParams {
    /// Particles per unit mass.
    pub n: usize,
    pub beta: f64,
    /// Total particles a replica may create before it is discarded.
    pub population_cap: usize,
    pub step: StepControl,
}

impl Default for SbmParams {
    fn default() -> Self {
        Self {
            n: 64,
            beta: DEFAULT_BETA,
            population_cap: 1_000_000,
            step: StepControl::default().with_dt(5e-3),
        }
    }
}

impl SbmParams {
    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    fn validate(&self) -> Result<(), SuperprocessError> {
        if self.n == 0 {
            return Err(SuperprocessError::BadResolution);
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(SuperprocessError::BadBeta(self.beta));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunFlag {
    PopulationCap,
    StepCap,
    Aborted(String),
}

/// One replica: `measures[k − 1]` is `X^k` for `k = 1..=target level`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbmRun {
    pub measures: Vec<ExitMeasure>,
    pub particles: usize,
    pub flag: Option<RunFlag>,
}

impl SbmRun {
    pub fn measure(&self, level: usize) -> &ExitMeasure {
        &self.measures[level - 1]
    }

    pub fn is_valid(&self) -> bool {
        self.flag.is_none()
    }
}

/// A particle waiting to be run.
#[derive(Clone, Copy, Debug)]
pub struct Seed {
    pub point: Point,
    pub time: f64,
    pub level: usize,
}

/// Runs the branching system from `seeds` (each of mass `1/n`) until every
/// line has left the target level or died. Lines are processed depth-first
/// from one stream, so the result depends only on the stream.
pub fn run_cluster(
    chain: &DomainChain,
    seeds: &[Seed],
    target: usize,
    params: &SbmParams,
    kill: Option<&(dyn Fn(Point) -> f64 + Sync)>,
    rng: &mut SimRng,
) -> SbmRun {
    let mass = 1.0 / params.n as f64;
    let motion = Motion {
        drift: None,
        rate: kill,
        clock: Some(params.beta * params.n as f64),
        event: EventKind::Kill,
    };
    let mut measures: Vec<ExitMeasure> = (1..=target).map(ExitMeasure::new).collect();
    let mut stack: Vec<Seed> = seeds.iter().rev().copied().collect();
    let mut particles = seeds.len();
    let mut flag = None;
    while let Some(s) = stack.pop() {
        let leg = Leg {
            start: s.point,
            t0: s.time,
            level: s.level,
            target,
        };
        let path = advance(chain, leg, &motion, &params.step, rng, false);
        for c in &path.crossings {
            measures[c.level - 1].atoms.push(Atom { point: c.point, mass });
        }
        match path.terminal {
            Terminal::Branched { time, point } => {
                if rng.random::<bool>() {
                    particles += 2;
                    if particles > params.population_cap {
                        flag = Some(RunFlag::PopulationCap);
                        break;
                    }
                    let child = Seed {
                        point,
                        time,
                        level: path.end_level,
                    };
                    stack.push(child);
                    stack.push(child);
                }
            }
            Terminal::Exited { .. } | Terminal::Killed { .. } => {}
            Terminal::Capped { .. } => {
                flag = Some(RunFlag::StepCap);
                break;
            }
            Terminal::Aborted { reason, .. } => {
                flag = Some(RunFlag::Aborted(reason));
                break;
            }
        }
    }
    SbmRun { measures, particles, flag }
}

/// Level of the innermost chain region holding `x`.
pub fn start_level(chain: &DomainChain, x: Point) -> Result<usize, GeometryError> {
    Ok(Leg::from_point(chain, x, Region::Full)?.level)
}

/// One replica of the exit measures `X^1, …, X^target` under `P_{δx}`.
/// `kill`, when given, is the spatial annihilation rate.
pub fn simulate_sbm(
    chain: &DomainChain,
    x: Point,
    params: &SbmParams,
    kill: Option<&ScalarField>,
    target: Region,
    rng: &mut SimRng,
) -> Result<SbmRun, SuperprocessError> {
    params.validate()?;
    let level = start_level(chain, x)?;
    let seed = Seed { point: x, time: 0.0, level };
    let seeds = vec![seed; params.n];
    let rate = kill.map(|k| move |p: Point| k.at(p).max(0.0));
    let rate_ref = rate.as_ref().map(|r| r as &(dyn Fn(Point) -> f64 + Sync));
    Ok(run_cluster(chain, &seeds, chain.level(target), params, rate_ref, rng))
}

/// Replicas of [`simulate_sbm`], reduced by `f` inside the worker. Discarded
/// replicas come back as `None`, in index order.
pub fn sample_runs<T: Send>(
    chain: &DomainChain,
    x: Point,
    params: &SbmParams,
    kill: Option<&ScalarField>,
    target: Region,
    reps: usize,
    seed: u64,
    f: impl Fn(&SbmRun) -> T + Sync + Send,
) -> Result<Vec<Option<T>>, SuperprocessError> {
    params.validate()?;
    start_level(chain, x)?;
    let out = replicate(seed, 0x5b, reps, |_, rng| {
        let run = simulate_sbm(chain, x, params, kill, target, rng).expect("validated");
        run.is_valid().then(|| f(&run))
    });
    Ok(out)
}

/// How a mean Laplace functional is turned into `w`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inversion {
    /// `ŵ = −log E exp(−⟨X, ψ⟩)`.
    #[default]
    Log,
    /// Exact for the particle system: averages `Π(1 − ψ(a)/n)` over atoms
    /// and returns `n(1 − m^{1/n})`, the solution of the PDE with data `ψ`
    /// up to time discretization. Needs `ψ ≤ n`.
    Particle,
}

impl Inversion {
    pub fn sample(self, m: &ExitMeasure, psi: &dyn Fn(Point) -> f64) -> f64 {
        match self {
            Inversion::Log => (-m.integrate(psi)).exp(),
            Inversion::Particle => m.atoms.iter().map(|a| (1.0 - a.mass * psi(a.point)).max(0.0)).product(),
        }
    }

    /// (w, se) from the mean Laplace functional and its SE.
    pub fn invert(self, mean: f64, se: f64, n: usize) -> Result<(f64, f64), SuperprocessError> {
        if !(mean > 0.0 && mean <= 1.0 + 1e-12) {
            return Err(SuperprocessError::DegenerateMean(mean));
        }
        let mean = mean.min(1.0);
        Ok(match self {
            Inversion::Log => (-mean.ln(), se / mean),
            Inversion::Particle => {
                let n = n as f64;
                let root = mean.powf(1.0 / n);
                (n * (1.0 - root), root / mean * se)
            }
        })
    }
}

fn check_test_function(
    chain: &DomainChain,
    level: usize,
    psi: &dyn Fn(Point) -> f64,
    inversion: Inversion,
    n: usize,
) -> Result<(), SuperprocessError> {
    // probe the boundary of the target region
    let region = chain.region_at(level);
    let c = chain.shape().center();
    for i in 0..256 {
        let a = i as f64 * std::f64::consts::TAU / 256.0;
        let far = c + Point::new(a.cos(), a.sin()) * 1e6;
        let p = chain.project(region, far);
        let v = psi(p);
        if !(v.is_finite() && v >= 0.0) {
            return Err(SuperprocessError::BadTestFunction { point: p, value: v });
        }
        if inversion == Inversion::Particle && v > n as f64 {
            return Err(SuperprocessError::TestFunctionTooLarge { value: v, n });
        }
    }
    Ok(())
}

fn finish(summary: &Summary, discarded: usize, seed: u64, n: usize) -> EstimatorResult {
    let mut r = EstimatorResult::from_summary(summary, seed);
    r.n = Some(n);
    r.discarded = discarded;
    r
}

/// Mean Laplace functional samples `E exp(−⟨X^k, ψ⟩)` (or the particle
/// product) for every level listed, from one set of replicas.
pub fn laplace_samples(
    chain: &DomainChain,
    x: Point,
    psis: &[(Region, &(dyn Fn(Point) -> f64 + Sync))],
    params: &SbmParams,
    inversion: Inversion,
    reps: usize,
    seed: u64,
) -> Result<(Vec<Summary>, usize), SuperprocessError> {
    let target = psis.iter().map(|(r, _)| chain.level(*r)).max().unwrap_or(1);
    for (r, psi) in psis {
        check_test_function(chain, chain.level(*r), psi, inversion, params.n)?;
    }
    let rows = sample_runs(chain, x, params, None, chain.region_at(target), reps, seed, |run| {
        psis.iter()
            .map(|(r, psi)| inversion.sample(run.measure(chain.level(*r)), psi))
            .collect::<Vec<f64>>()
    })?;
    let mut summaries = vec![Summary::default(); psis.len()];
    let mut discarded = 0;
    for row in &rows {
        match row {
            Some(vals) => vals.iter().zip(summaries.iter_mut()).for_each(|(v, s)| s.push(*v)),
            None => discarded += 1,
        }
    }
    if discarded == reps {
        return Err(SuperprocessError::NoValidReplicas);
    }
    Ok((summaries, discarded))
}

/// `ŵ_ψ(x)` on `∂D_k` for several `(k, ψ)` pairs from shared replicas.
pub fn estimate_w_many(
    chain: &DomainChain,
    x: Point,
    psis: &[(Region, &(dyn Fn(Point) -> f64 + Sync))],
    params: &SbmParams,
    inversion: Inversion,
    reps: usize,
    seed: u64,
) -> Result<Vec<EstimatorResult>, SuperprocessError> {
    let (summaries, discarded) = laplace_samples(chain, x, psis, params, inversion, reps, seed)?;
    summaries
        .iter()
        .map(|s| {
            let (w, se) = inversion.invert(s.mean, s.se(), params.n)?;
            let mut r = finish(s, discarded, seed, params.n);
            r.mean = w;
            r.se = se;
            Ok(r)
        })
        .collect()
}

/// `ŵ_ψ(x) = N_x(1 − exp −⟨X^k, ψ⟩)` estimated from `E_{P_{δx}} exp(−⟨X^k, ψ⟩)`.
pub fn estimate_w(
    chain: &DomainChain,
    x: Point,
    psi: &(dyn Fn(Point) -> f64 + Sync),
    region: Region,
    params: &SbmParams,
    inversion: Inversion,
    reps: usize,
    seed: u64,
) -> Result<EstimatorResult, SuperprocessError> {
    Ok(estimate_w_many(chain, x, &[(region, psi)], params, inversion, reps, seed)?.remove(0))
}

/// `û = N_x(range hits Γ)` from the frequency with which some line exits
/// `∂D` inside the arcs. With [`Inversion::Particle`] the target is the
/// capped blow-up solution with cap `n`.
pub fn estimate_hitting(
    chain: &DomainChain,
    x: Point,
    arcs: &[BoundaryArc],
    params: &SbmParams,
    inversion: Inversion,
    reps: usize,
    seed: u64,
) -> Result<EstimatorResult, SuperprocessError> {
    params.validate()?;
    let center = chain.shape().center();
    let rows = sample_runs(chain, x, params, None, Region::Full, reps, seed, |run| {
        let exit = run.measure(chain.level(Region::Full));
        let hit = exit
            .atoms
            .iter()
            .any(|a| arcs.iter().any(|arc| arc.contains_direction(center, a.point)));
        if hit { 0.0 } else { 1.0 }
    })?;
    let valid: Vec<f64> = rows.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(SuperprocessError::NoValidReplicas);
    }
    let s = Summary::from_slice(&valid);
    let (u, se) = inversion.invert(s.mean, s.se(), params.n)?;
    let mut r = finish(&s, reps - valid.len(), seed, params.n);
    r.mean = u;
    r.se = se;
    Ok(r)
}

/// `E⟨X^k, φ⟩` from the particle system and `E_x φ(B_{τ_k})` from plain
/// Brownian paths; equal by the first-moment formula.
pub fn first_moment_check(
    chain: &DomainChain,
    x: Point,
    phi: &(dyn Fn(Point) -> f64 + Sync),
    region: Region,
    params: &SbmParams,
    reps: usize,
    seed: u64,
) -> Result<(EstimatorResult, EstimatorResult), SuperprocessError> {
    let level = chain.level(region);
    let rows = sample_runs(chain, x, params, None, region, reps, seed, |run| run.measure(level).integrate(phi))?;
    let valid: Vec<f64> = rows.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(SuperprocessError::NoValidReplicas);
    }
    let lhs = finish(&Summary::from_slice(&valid), reps - valid.len(), seed, params.n);
    let leg = Leg::from_point(chain, x, region)?;
    let bm = replicate(seed, 0xb1, reps, |_, rng| {
        let p = advance(chain, leg, &Motion::brownian(), &params.step, rng, false);
        p.terminal.is_exit().then(|| phi(p.terminal.point()))
    });
    let valid: Vec<f64> = bm.iter().flatten().copied().collect();
    let rhs = finish(&Summary::from_slice(&valid), reps - valid.len(), seed, params.n);
    Ok((lhs, rhs))
}

/// Fields needed by the two-point formula: `w_φ` on `D_k` and the first
/// moments `h_i = N_·(e_φ⟨X^k, ψ_i⟩)`, which solve `½Δh = 4w_φ h`, `h = ψ_i`.
pub struct PalmFields {
    pub w_phi: ScalarField,
    pub h1: ScalarField,
    pub h2: ScalarField,
}

impl PalmFields {
    pub fn solve(
        solver: &PdeSolver,
        region: Region,
        phi: &dyn Fn(Point) -> f64,
        psi1: &dyn Fn(Point) -> f64,
        psi2: &dyn Fn(Point) -> f64,
    ) -> Result<Self, PdeError> {
        let w_phi = solver.solve_dirichlet(region, phi)?;
        let c = w_phi.map("8w", |w| 8.0 * w.max(0.0));
        let zero = solver.zero(region);
        let h1 = solver.solve_linear(region, &c, &zero, psi1)?;
        let h2 = solver.solve_linear(region, &c, &zero, psi2)?;
        Ok(Self { w_phi, h1, h2 })
    }
}

/// Two-point Palm formula. Left: `N_x(e_φ⟨X^k,ψ₁⟩⟨X^k,ψ₂⟩)` from particle
/// moments through the Campbell decomposition. Right: Brownian paths with
/// `4∫_0^{τ_k} exp(−∫_0^t 4w_φ) h₁ h₂ dt`.
#[allow(clippy::too_many_arguments)]
pub fn extended_palm_check(
    solver: &PdeSolver,
    x: Point,
    phi: &(dyn Fn(Point) -> f64 + Sync),
    psi1: &(dyn Fn(Point) -> f64 + Sync),
    psi2: &(dyn Fn(Point) -> f64 + Sync),
    region: Region,
    params: &SbmParams,
    reps: usize,
    seed: u64,
) -> Result<(EstimatorResult, EstimatorResult), SuperprocessError> {
    let chain = solver.chain();
    let level = chain.level(region);
    let rows = sample_runs(chain, x, params, None, region, reps, seed, |run| {
        let m = run.measure(level);
        let e = (-m.integrate(phi)).exp();
        let a = m.integrate(psi1);
        let b = m.integrate(psi2);
        [e, a * e, b * e, a * b * e]
    })?;
    let valid: Vec<[f64; 4]> = rows.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(SuperprocessError::NoValidReplicas);
    }
    let (mean, se) = jackknife(&valid, 100, |m| m[3] / m[0] - (m[1] / m[0]) * (m[2] / m[0]));
    let lhs = EstimatorResult {
        mean,
        se,
        reps: valid.len(),
        n: Some(params.n),
        seed,
        config_hash: String::new(),
        discarded: reps - valid.len(),
    };

    let fields = PalmFields::solve(solver, region, phi, psi1, psi2)?;
    let leg = Leg::from_point(chain, x, region)?;
    let bm = replicate(seed, 0xb2, reps, |_, rng| {
        let p = advance(chain, leg, &Motion::brownian(), &params.step, rng, true);
        if !p.terminal.is_exit() {
            return None;
        }
        let mut acc = 0.0;
        let mut kill = 0.0_f64;
        for w in p.vertices.windows(2) {
            let dt = w[1].t - w[0].t;
            let y = w[0].p;
            acc += (-kill).exp() * fields.h1.at(y) * fields.h2.at(y) * dt;
            kill += 4.0 * fields.w_phi.at(y) * dt;
        }
        Some(4.0 * acc)
    });
    let valid: Vec<f64> = bm.iter().flatten().copied().collect();
    let rhs = finish(&Summary::from_slice(&valid), reps - valid.len(), seed, params.n);
    Ok((lhs, rhs))
}

/// `E_{P_{δx}}[exp(λ⟨X^k, 1⟩)] − 1`.
pub fn exp_moment_diag(
    chain: &DomainChain,
    x: Point,
    lambda: f64,
    region: Region,
    params: &SbmParams,
    reps: usize,
    seed: u64,
) -> Result<EstimatorResult, SuperprocessError> {
    let level = chain.level(region);
    let rows = sample_runs(chain, x, params, None, region, reps, seed, |run| {
        (lambda * run.measure(level).total_mass()).exp_m1()
    })?;
    let valid: Vec<f64> = rows.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(SuperprocessError::NoValidReplicas);
    }
    let s = Summary::from_slice(&valid);
    if !s.mean.is_finite() || !s.se().is_finite() {
        return Err(SuperprocessError::Diverged(lambda));
    }
    Ok(finish(&s, reps - valid.len(), seed, params.n))
}

/// One candidate of a branch-rate calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub beta: f64,
    pub estimate: EstimatorResult,
    pub target: f64,
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub points: Vec<CalibrationPoint>,
    /// Candidate with the smallest `|ŵ − g|/SE`.
    pub beta: f64,
    pub z: f64,
}

/// Scans `candidates` and keeps the branch-rate constant under which
/// `ŵ_g(x) = g(x)` holds best, where `g` solves the PDE with data `f` on `∂D`
/// and the estimate uses `ψ = g` on `∂D_k`.
pub fn calibrate_beta(
    solver: &PdeSolver,
    x: Point,
    f: &dyn Fn(Point) -> f64,
    region: Region,
    candidates: &[f64],
    params: &SbmParams,
    reps: usize,
    seed: u64,
) -> Result<Calibration, SuperprocessError> {
    let g = solver.solve_dirichlet(Region::Full, f)?;
    let target = g.at(x);
    let psi = |p: Point| g.at(p).max(0.0);
    let mut points = Vec::new();
    for (i, &beta) in candidates.iter().enumerate() {
        let p = params.clone().with_beta(beta);
        let est = estimate_w(solver.chain(), x, &psi, region, &p, Inversion::Log, reps, seed.wrapping_add(i as u64))?;
        let z = est.z_against_value(target);
        points.push(CalibrationPoint {
            beta,
            estimate: est,
            target,
            z,
        });
    }
    let best = points
        .iter()
        .min_by(|a, b| a.z.total_cmp(&b.z))
        .ok_or(SuperprocessError::NoValidReplicas)?;
    Ok(Calibration {
        beta: best.beta,
        z: best.z,
        points,
    })
}
