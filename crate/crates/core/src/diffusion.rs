//! Single-particle engines: Brownian motion, killed Brownian motion and
//! h-transformed diffusions, stepped until they leave a region of the chain.
//!
//! A particle carries a level `j`: the smallest chain region it has not yet
//! left. Every first crossing of `∂D_j` on the way out to the target region
//! is recorded, so one run serves all `k` up to the target.

use crate::field::{ScalarField, VectorField};
use crate::geometry::{DomainChain, GeometryError, Point, Region};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

/// Step-size policy. Steps shrink like `kappa·dist²` near the boundary of
/// the current level, never below `dt_min`, and are further capped so that
/// drift moves and per-step event probabilities stay small.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepControl {
    pub dt: f64,
    pub dt_min: f64,
    pub kappa: f64,
    /// `|drift|·dt ≤ drift_ratio·√dt`.
    pub drift_ratio: f64,
    /// `rate·dt ≤ rate_ratio`.
    pub rate_ratio: f64,
    pub max_steps: usize,
}

impl Default for StepControl {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            dt_min: 1e-6,
            kappa: 0.25,
            drift_ratio: 0.1,
            rate_ratio: 0.1,
            max_steps: 2_000_000,
        }
    }
}

impl StepControl {
    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vertex {
    pub t: f64,
    pub p: Point,
}

/// First crossing of `∂D_level`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub level: usize,
    pub time: f64,
    pub point: Point,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Terminal {
    /// Left the target region (its level) at `point`.
    Exited { level: usize, time: f64, point: Point },
    Killed { time: f64, point: Point },
    Branched { time: f64, point: Point },
    Capped { time: f64, point: Point },
    Aborted { time: f64, point: Point, reason: String },
}

impl Terminal {
    pub fn time(&self) -> f64 {
        match self {
            Terminal::Exited { time, .. }
            | Terminal::Killed { time, .. }
            | Terminal::Branched { time, .. }
            | Terminal::Capped { time, .. }
            | Terminal::Aborted { time, .. } => *time,
        }
    }

    pub fn point(&self) -> Point {
        match self {
            Terminal::Exited { point, .. }
            | Terminal::Killed { point, .. }
            | Terminal::Branched { point, .. }
            | Terminal::Capped { point, .. }
            | Terminal::Aborted { point, .. } => *point,
        }
    }

    pub fn is_exit(&self) -> bool {
        matches!(self, Terminal::Exited { .. })
    }

    pub fn is_interior_event(&self) -> bool {
        matches!(self, Terminal::Killed { .. } | Terminal::Branched { .. })
    }

    pub fn is_flagged(&self) -> bool {
        matches!(self, Terminal::Capped { .. } | Terminal::Aborted { .. })
    }

    fn label(&self) -> &'static str {
        match self {
            Terminal::Exited { .. } => "exit",
            Terminal::Killed { .. } => "kill",
            Terminal::Branched { .. } => "branch",
            Terminal::Capped { .. } => "cap",
            Terminal::Aborted { .. } => "abort",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticlePath {
    pub start_level: usize,
    /// Vertices including the start and the terminal point; empty when the
    /// run was not recorded.
    pub vertices: Vec<Vertex>,
    pub crossings: Vec<Crossing>,
    pub terminal: Terminal,
    /// Level after the last crossing.
    pub end_level: usize,
    pub steps: usize,
    /// `∫ rate ds` along the path (left Riemann sum), when a rate is set.
    pub rate_integral: f64,
}

impl ParticlePath {
    pub fn duration(&self) -> f64 {
        let t0 = self.vertices.first().map(|v| v.t).unwrap_or(0.0);
        self.terminal.time() - t0
    }

    /// Crossing of `∂D_level`, if it happened on this path.
    pub fn crossing(&self, level: usize) -> Option<&Crossing> {
        self.crossings.iter().find(|c| c.level == level)
    }

    /// CSV rows `t,x,y,event`.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,x,y,event")?;
        let last = self.vertices.len().saturating_sub(1);
        for (i, v) in self.vertices.iter().enumerate() {
            let ev = if i == 0 {
                "start"
            } else if i == last {
                self.terminal.label()
            } else if self.crossings.iter().any(|c| c.time == v.t) {
                "cross"
            } else {
                "step"
            };
            writeln!(out, "{},{},{},{}", v.t, v.p.x, v.p.y, ev)?;
        }
        Ok(())
    }
}

/// What an interior event means for the caller.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    Kill,
    Branch,
}

/// Dynamics of one particle: optional drift, optional spatial event rate
/// (sampled per step as `1 − exp(−rate·dt)` at the current vertex, with
/// outcome `event`), and an optional constant-rate exponential clock whose
/// ring time is exact and which always means branching.
#[derive(Clone, Copy)]
pub struct Motion<'a> {
    pub drift: Option<&'a VectorField>,
    pub rate: Option<&'a (dyn Fn(Point) -> f64 + Sync)>,
    pub clock: Option<f64>,
    pub event: EventKind,
}

impl<'a> Motion<'a> {
    pub fn brownian() -> Self {
        Self {
            drift: None,
            rate: None,
            clock: None,
            event: EventKind::Kill,
        }
    }
}

/// Where a run starts and where it stops.
#[derive(Clone, Copy, Debug)]
pub struct Leg {
    pub start: Point,
    pub t0: f64,
    /// Smallest level not yet left.
    pub level: usize,
    /// Stop on leaving this level.
    pub target: usize,
}

impl Leg {
    /// Fresh start at `x` with the level of the innermost region holding it.
    pub fn from_point(chain: &DomainChain, x: Point, target: Region) -> Result<Self, GeometryError> {
        let level = chain
            .innermost_containing(x)
            .map(|r| chain.level(r))
            .ok_or(GeometryError::StartNotInside {
                point: x,
                signed_distance: chain.signed_distance(Region::Full, x),
            })?;
        Ok(Self {
            start: x,
            t0: 0.0,
            level,
            target: chain.level(target),
        })
    }
}

/// One Gaussian step with variance `dt` per coordinate.
pub fn step_bm<R: Rng + ?Sized>(x: Point, dt: f64, rng: &mut R) -> Point {
    let s = dt.sqrt();
    let zx: f64 = StandardNormal.sample(rng);
    let zy: f64 = StandardNormal.sample(rng);
    Point::new(x.x + s * zx, x.y + s * zy)
}

/// Runs one particle from `leg` until it leaves the target level, an event
/// fires, or the step cap is hit.
pub fn advance<R: Rng + ?Sized>(
    chain: &DomainChain,
    leg: Leg,
    motion: &Motion,
    ctl: &StepControl,
    rng: &mut R,
    record: bool,
) -> ParticlePath {
    let mut x = leg.start;
    let mut t = leg.t0;
    let mut level = leg.level;
    let mut vertices = Vec::new();
    let mut crossings = Vec::new();
    let mut rate_integral = 0.0;
    if record {
        vertices.push(Vertex { t, p: x });
    }
    let mut clock_left = motion.clock.map(|r| {
        let e: f64 = Exp1.sample(rng);
        e / r
    });
    let finish = |terminal: Terminal, vertices: Vec<Vertex>, crossings: Vec<Crossing>, level: usize, steps: usize, ri: f64| ParticlePath {
        start_level: leg.level,
        vertices,
        crossings,
        terminal,
        end_level: level,
        steps,
        rate_integral: ri,
    };
    if level > leg.target {
        // already outside the target: nothing to run
        let terminal = Terminal::Exited {
            level: leg.target,
            time: t,
            point: x,
        };
        return finish(terminal, vertices, crossings, level, 0, 0.0);
    }
    for steps in 0..ctl.max_steps {
        let region = chain.region_at(level);
        let dist = chain.signed_distance(region, x);
        let mut dt = (ctl.kappa * dist * dist).clamp(ctl.dt_min, ctl.dt);
        let drift = match motion.drift {
            Some(f) => {
                let b = f.at(x);
                if !b.is_finite() {
                    let reason = "non-finite drift".to_string();
                    return finish(Terminal::Aborted { time: t, point: x, reason }, vertices, crossings, level, steps, rate_integral);
                }
                let b2 = b.norm_sq();
                if b2 > 0.0 {
                    dt = dt.min((ctl.drift_ratio * ctl.drift_ratio / b2).max(ctl.dt_min));
                }
                b
            }
            None => Point::ORIGIN,
        };
        if let Some(rate_fn) = motion.rate {
            let r = rate_fn(x);
            if !(r >= 0.0) || !r.is_finite() {
                let reason = format!("bad event rate {r}");
                return finish(Terminal::Aborted { time: t, point: x, reason }, vertices, crossings, level, steps, rate_integral);
            }
            if r > 0.0 {
                dt = dt.min((ctl.rate_ratio / r).max(ctl.dt_min));
                if let Some(left) = clock_left {
                    dt = dt.min(left);
                }
                rate_integral += r * dt;
                let u: f64 = rng.random();
                if u < -(-r * dt).exp_m1() {
                    let terminal = match motion.event {
                        EventKind::Kill => Terminal::Killed { time: t, point: x },
                        EventKind::Branch => Terminal::Branched { time: t, point: x },
                    };
                    return finish(terminal, vertices, crossings, level, steps, rate_integral);
                }
            }
        }
        let mut ring = false;
        if let Some(left) = clock_left.as_mut() {
            if *left <= dt {
                dt = *left;
                ring = true;
            }
            *left -= dt;
        }
        let y = step_bm(x + drift * dt, dt, rng);
        // resolve crossings along x → y, possibly several levels at once
        let mut from = x;
        loop {
            let region = chain.region_at(level);
            let hit = match chain.first_exit((from, y), region) {
                Ok(h) => h,
                Err(e) => {
                    let reason = e.to_string();
                    return finish(Terminal::Aborted { time: t, point: from, reason }, vertices, crossings, level, steps, rate_integral);
                }
            };
            let Some((frac, point)) = hit else { break };
            // fraction is along from → y; map back to time within the step
            let seg = (y - x).norm();
            let along = if seg > 0.0 { (point - x).norm() / seg } else { frac };
            let time = t + along.clamp(0.0, 1.0) * dt;
            crossings.push(Crossing { level, time, point });
            if level == leg.target {
                if record {
                    vertices.push(Vertex { t: time, p: point });
                }
                let terminal = Terminal::Exited { level, time, point };
                return finish(terminal, vertices, crossings, level + 1, steps + 1, rate_integral);
            }
            level += 1;
            from = point;
        }
        x = y;
        t += dt;
        if record {
            vertices.push(Vertex { t, p: x });
        }
        if ring {
            let terminal = Terminal::Branched { time: t, point: x };
            return finish(terminal, vertices, crossings, level, steps + 1, rate_integral);
        }
    }
    finish(Terminal::Capped { time: t, point: x }, vertices, crossings, level, ctl.max_steps, rate_integral)
}

/// Brownian motion killed at rate `kill_rate`, run until it leaves `region`.
pub fn simulate_killed<R: Rng + ?Sized>(
    chain: &DomainChain,
    x0: Point,
    kill_rate: &ScalarField,
    region: Region,
    ctl: &StepControl,
    rng: &mut R,
) -> Result<ParticlePath, GeometryError> {
    let rate = |p: Point| kill_rate.at(p).max(0.0);
    let motion = Motion {
        drift: None,
        rate: Some(&rate),
        clock: None,
        event: EventKind::Kill,
    };
    Ok(advance(chain, Leg::from_point(chain, x0, region)?, &motion, ctl, rng, true))
}

/// The h-transform: drift `∇log h` (passed precomputed) plus the caller's
/// residual killing.
pub fn simulate_transform<R: Rng + ?Sized>(
    chain: &DomainChain,
    x0: Point,
    drift: &VectorField,
    residual_kill: Option<&(dyn Fn(Point) -> f64 + Sync)>,
    region: Region,
    ctl: &StepControl,
    rng: &mut R,
) -> Result<ParticlePath, GeometryError> {
    let motion = Motion {
        drift: Some(drift),
        rate: residual_kill,
        clock: None,
        event: EventKind::Kill,
    };
    Ok(advance(chain, Leg::from_point(chain, x0, region)?, &motion, ctl, rng, true))
}

/// Left Riemann sum of `f` along the recorded vertices.
pub fn path_integral(path: &ParticlePath, f: impl Fn(Point) -> f64) -> f64 {
    path.vertices.windows(2).map(|w| f(w[0].p) * (w[1].t - w[0].t)).sum()
}

/// [`path_integral`] of a field.
pub fn field_integral(path: &ParticlePath, field: &ScalarField) -> f64 {
    path_integral(path, |p| field.at(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::grad_log;
    use crate::geometry::{build_chain, Shape};
    use crate::pde::{NewtonOptions, PdeSolver};
    use crate::rng::stream;
    use crate::stats::{chi_square_gof, ks_one_sample, Summary};
    use std::f64::consts::PI;

    fn unit_chain() -> DomainChain {
        build_chain(Shape::unit_disk(), 3, 1.0, Point::ORIGIN).unwrap()
    }

    #[test]
    fn gaussian_increments() {
        let mut rng = stream(1, &[]);
        let dt = 0.01;
        assert_eq!(step_bm(Point::new(0.3, 0.4), 0.0, &mut rng), Point::new(0.3, 0.4));
        let (mut sx, mut sy) = (Summary::default(), Summary::default());
        for _ in 0..100_000 {
            let p = step_bm(Point::ORIGIN, dt, &mut rng);
            sx.push(p.x);
            sy.push(p.y);
        }
        let sd = (dt / 100_000f64).sqrt();
        assert!(sx.mean.abs() < 4.0 * sd && sy.mean.abs() < 4.0 * sd);
        assert!((sx.variance() / dt - 1.0).abs() < 0.05);
        assert!((sy.variance() / dt - 1.0).abs() < 0.05);
    }

    #[test]
    fn zero_kill_always_exits() {
        let chain = unit_chain();
        let solver = PdeSolver::new(chain.clone(), 0.1, NewtonOptions::default());
        let zero = solver.zero(Region::Full);
        let mut rng = stream(2, &[]);
        for _ in 0..200 {
            let p = simulate_killed(&chain, Point::ORIGIN, &zero, Region::Sub(1), &StepControl::default(), &mut rng).unwrap();
            assert!(p.terminal.is_exit());
            let q = p.terminal.point();
            assert!((q.norm() - 0.5).abs() < 1e-10);
            // all vertices before the exit lie inside
            assert!(p.vertices[..p.vertices.len() - 1].iter().all(|v| v.p.norm() < 0.5));
        }
    }

    #[test]
    fn constant_kill_gives_exponential_lifetime() {
        let chain = build_chain(
            Shape::Disk {
                center: Point::ORIGIN,
                radius: 100.0,
            },
            1,
            1.0,
            Point::ORIGIN,
        )
        .unwrap();
        let c = 1.3;
        let solver = PdeSolver::new(chain.clone(), 20.0, NewtonOptions::default());
        let rate = solver.zero(Region::Full).map("c", |_| c);
        let ctl = StepControl::default().with_dt(0.01);
        let horizon = 1.0;
        let mut rng = stream(3, &[]);
        let reps = 10_000;
        let survived: Vec<f64> = (0..reps)
            .map(|_| {
                let p = simulate_killed(&chain, Point::ORIGIN, &rate, Region::Sub(1), &ctl, &mut rng).unwrap();
                assert!(matches!(p.terminal, Terminal::Killed { .. }));
                if p.terminal.time() > horizon { 1.0 } else { 0.0 }
            })
            .collect();
        let s = Summary::from_slice(&survived);
        let expect = (-c * horizon).exp();
        assert!((s.mean - expect).abs() < 3.0 * s.se(), "{} vs {expect}", s.mean);
    }

    #[test]
    fn exit_before_kill_matches_pde() {
        let chain = unit_chain();
        let c = 2.0;
        let solver = PdeSolver::new(chain.clone(), 1.0 / 64.0, NewtonOptions::default());
        let zero = solver.zero(Region::Full);
        let rate = zero.map("c", |_| c);
        // ½Δp − c p = 0 ⇔ Δp − 2c p = 0, p = 1 on ∂D_1
        let p = solver
            .solve_linear(Region::Sub(1), &zero.map("2c", |_| 2.0 * c), &zero, &|_| 1.0)
            .unwrap();
        let mut rng = stream(4, &[]);
        let ctl = StepControl::default();
        let hits: Vec<f64> = (0..10_000)
            .map(|_| {
                let path = simulate_killed(&chain, Point::ORIGIN, &rate, Region::Sub(1), &ctl, &mut rng).unwrap();
                if path.terminal.is_exit() { 1.0 } else { 0.0 }
            })
            .collect();
        let s = Summary::from_slice(&hits);
        let oracle = p.at(Point::ORIGIN);
        assert!((s.mean - oracle).abs() < 3.0 * s.se(), "{} vs {oracle}", s.mean);
    }

    #[test]
    fn identity_transform_exits_uniformly() {
        let chain = unit_chain();
        let solver = PdeSolver::new(chain.clone(), 0.05, NewtonOptions::default());
        let one = solver.zero(Region::Full).map("one", |_| 1.0);
        let drift = grad_log(&one, 1e-12);
        let mut rng = stream(5, &[]);
        let ctl = StepControl::default().with_dt(2e-3);
        let angles: Vec<f64> = (0..10_000)
            .map(|_| {
                let p = simulate_transform(&chain, Point::ORIGIN, &drift, None, Region::Full, &ctl, &mut rng).unwrap();
                assert!(p.terminal.is_exit());
                let q = p.terminal.point();
                (q.y.atan2(q.x) + PI) / (2.0 * PI)
            })
            .collect();
        let t = ks_one_sample(&angles, |u| u.clamp(0.0, 1.0));
        assert!(t.p_value > 0.01, "p = {}", t.p_value);
    }

    #[test]
    fn harmonic_transform_exit_law_is_f_weighted() {
        let chain = unit_chain();
        let solver = PdeSolver::new(chain.clone(), 1.0 / 64.0, NewtonOptions::default());
        let zero = solver.zero(Region::Full);
        let f = |p: Point| 1.0 + 0.8 * p.y.atan2(p.x).cos();
        let h = solver.solve_linear(Region::Full, &zero, &zero, &f).unwrap();
        let drift = grad_log(&h, 1e-12);
        let mut rng = stream(6, &[]);
        let ctl = StepControl::default().with_dt(2e-3);
        let bins = 8;
        let mut counts = vec![0u64; bins];
        for _ in 0..10_000 {
            let p = simulate_transform(&chain, Point::ORIGIN, &drift, None, Region::Full, &ctl, &mut rng).unwrap();
            let q = p.terminal.point();
            let u = (q.y.atan2(q.x) + PI) / (2.0 * PI);
            counts[((u * bins as f64) as usize).min(bins - 1)] += 1;
        }
        // density ∝ f(θ)/2π; bin mass from the antiderivative θ + 0.8 sin θ
        let total = 2.0 * PI;
        let probs: Vec<f64> = (0..bins)
            .map(|b| {
                let a = -PI + 2.0 * PI * b as f64 / bins as f64;
                let c = a + 2.0 * PI / bins as f64;
                ((c + 0.8 * c.sin()) - (a + 0.8 * a.sin())) / total
            })
            .collect();
        let t = chi_square_gof(&counts, &probs);
        assert!(t.p_value > 0.01, "p = {} counts {counts:?}", t.p_value);
    }

    #[test]
    fn potential_plus_harmonic_splits_exit_and_death() {
        // u = h + U^g f for the L_g process; the u-transform exits with
        // probability h(x)/u(x) and dies inside otherwise
        let chain = unit_chain();
        let solver = PdeSolver::new(chain.clone(), 1.0 / 64.0, NewtonOptions::default());
        let zero = solver.zero(Region::Full);
        let two_g = zero.map("2g", |_| 3.0);
        let two_f = zero.map("2f", |_| 2.0);
        let h = solver.solve_linear(Region::Full, &two_g, &zero, &|_| 1.0).unwrap();
        let p = solver.solve_linear(Region::Full, &two_g, &two_f, &|_| 0.0).unwrap();
        let u = h.zip_with(&p, "u", |a, b| a + b).unwrap();
        let drift = grad_log(&u, 1e-12);
        let kill = |x: Point| 1.0 / u.at(x).max(1e-12);
        let x0 = Point::new(0.2, -0.1);
        let mut rng = stream(9, &[]);
        let ctl = StepControl::default().with_dt(2e-3);
        let exits: Vec<f64> = (0..10_000)
            .map(|_| {
                let path = simulate_transform(&chain, x0, &drift, Some(&kill), Region::Full, &ctl, &mut rng).unwrap();
                assert!(!path.terminal.is_flagged());
                if path.terminal.is_exit() { 1.0 } else { 0.0 }
            })
            .collect();
        let s = Summary::from_slice(&exits);
        let oracle = h.at(x0) / u.at(x0);
        assert!((s.mean - oracle).abs() < 3.0 * s.se(), "{} vs {oracle}", s.mean);
    }

    #[test]
    fn path_integrals() {
        let path = ParticlePath {
            start_level: 1,
            vertices: (0..=100)
                .map(|i| {
                    let s = i as f64 / 100.0;
                    Vertex { t: s, p: Point::new(s, 0.0) }
                })
                .collect(),
            crossings: vec![],
            terminal: Terminal::Exited {
                level: 1,
                time: 1.0,
                point: Point::new(1.0, 0.0),
            },
            end_level: 2,
            steps: 100,
            rate_integral: 0.0,
        };
        assert_eq!(path_integral(&path, |_| 0.0), 0.0);
        assert!((path_integral(&path, |_| 2.5) - 2.5).abs() < 1e-12);
        // ∫_0^1 s² ds = 1/3, left sum error ≤ dt
        let v = path_integral(&path, |p| p.norm_sq());
        assert!((v - 1.0 / 3.0).abs() < 0.01 && v < 1.0 / 3.0);
    }

    #[test]
    fn multi_level_crossings_are_ordered() {
        let chain = unit_chain();
        let mut rng = stream(8, &[]);
        let leg = Leg::from_point(&chain, Point::ORIGIN, Region::Full).unwrap();
        for _ in 0..100 {
            let p = advance(&chain, leg, &Motion::brownian(), &StepControl::default(), &mut rng, false);
            let levels: Vec<usize> = p.crossings.iter().map(|c| c.level).collect();
            assert_eq!(levels, vec![1, 2, 3, 4]);
            assert!(p.crossings.windows(2).all(|w| w[0].time <= w[1].time));
            for c in &p.crossings {
                let r = 1.0 - chain.offset(chain.region_at(c.level));
                assert!((c.point.norm() - r).abs() < 1e-10);
            }
        }
    }
}
