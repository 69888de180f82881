//! Verification harness. Each check produces a [`Report`]: a list of
//! pass/fail lines with the measured value and the bound it was held to.
//! Everything random is seeded from the configuration, so a report is
//! reproducible bit for bit.

use crate::backbone::{branch_stats, gamma_bins, grow_many, grow_tree, BackboneTree, BranchStats, TransformFields, TreeLaw, TreeSummary};
use crate::config::{ConfigError, ExperimentConfig, Scenario};
use crate::geometry::{build_chain, DomainChain, Point, Region, Shape};
use crate::immigration::{cluster_params, laplace_semi_analytic, mcheck_lhs, mhat_lhs, realize_y, shifted_solution, ImmigrationError, ImmigrationPlan};
use crate::pde::{PdeError, PdeSolver};
use crate::rng::{child_seed, replicate, stream};
use crate::stats::{chi_square_two_sample, jackknife, ks_two_sample, EstimatorResult, Summary, TestOutcome};
use crate::subsets::{
    alt_subset_sum, c_closed_form, c_sequence, mcheck_expansion_check, partition_regrouping, product_expansion, ratio, set_recurrence_check, u_from_v, v_from_u_unchecked, vupper_relations, Subset,
    SubsetError, SubsetFamily,
};
use crate::superprocess::{calibrate_beta, estimate_w_many, extended_palm_check, first_moment_check, sample_runs, Calibration, Inversion, SuperprocessError};
use num::BigRational;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Superprocess(#[from] SuperprocessError),
    #[error(transparent)]
    Backbone(#[from] crate::backbone::BackboneError),
    #[error(transparent)]
    Immigration(#[from] ImmigrationError),
    #[error(transparent)]
    Subset(#[from] SubsetError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error("{0}")]
    Unsupported(String),
}

/// One line of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub label: String,
    pub passed: bool,
    pub value: f64,
    pub bound: f64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

impl Check {
    pub fn at_most(label: impl Into<String>, value: f64, bound: f64) -> Self {
        Self {
            label: label.into(),
            passed: value <= bound,
            value,
            bound,
            note: String::new(),
        }
    }

    pub fn at_least(label: impl Into<String>, value: f64, bound: f64) -> Self {
        Self {
            label: label.into(),
            passed: value >= bound,
            value,
            bound,
            note: String::new(),
        }
    }

    /// A yes/no check; `value` is 1 when it holds.
    pub fn holds(label: impl Into<String>, ok: bool) -> Self {
        Self {
            label: label.into(),
            passed: ok,
            value: if ok { 1.0 } else { 0.0 },
            bound: 1.0,
            note: String::new(),
        }
    }

    pub fn note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    /// Trend reports: failures are reported but do not fail a run.
    pub soft: bool,
    pub passed: bool,
    pub checks: Vec<Check>,
    #[serde(default)]
    pub data: serde_json::Value,
}

impl Report {
    fn new(name: &str, exp: &Experiment, soft: bool) -> Self {
        Self {
            name: name.to_string(),
            config_hash: exp.hash.clone(),
            seed: exp.config.seed,
            soft,
            passed: true,
            checks: Vec::new(),
            data: serde_json::Value::Null,
        }
    }

    fn push(&mut self, check: Check) {
        self.passed &= check.passed;
        self.checks.push(check);
    }

    fn with_data(mut self, data: impl Serialize) -> Self {
        self.data = serde_json::to_value(data).expect("serializable report data");
        self
    }

    /// Failed and not a trend report.
    pub fn hard_failure(&self) -> bool {
        !self.passed && !self.soft
    }

    pub fn status(&self) -> &'static str {
        match (self.passed, self.soft) {
            (true, _) => "PASS",
            (false, true) => "WARN",
            (false, false) => "FAIL",
        }
    }

    /// Plain-text table, one line per check.
    pub fn table(&self) -> String {
        let width = self.checks.iter().map(|c| c.label.chars().count()).max().unwrap_or(0);
        let mut out = format!("{} [{}]\n", self.name, self.status());
        for c in &self.checks {
            let pad = width - c.label.chars().count();
            let _ = write!(
                out,
                "  {}{}  {:>12.6e}  bound {:>10.3e}  {}",
                c.label,
                " ".repeat(pad),
                c.value,
                c.bound,
                if c.passed { "ok" } else { "FAILED" }
            );
            if !c.note.is_empty() {
                let _ = write!(out, "  ({})", c.note);
            }
            out.push('\n');
        }
        out
    }
}

/// Which identity between a transformed excursion law and its backbone
/// representation is tested.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Identity {
    /// Transform by `e_u − e_g`, backbone with two children at death.
    Transform,
    /// Same transform, branching-diffusion backbone.
    Branching,
    /// Tagged family `u^A`, tagged backbone.
    Tagged,
}

impl Identity {
    pub fn name(self) -> &'static str {
        match self {
            Identity::Transform => "transform-identity",
            Identity::Branching => "branching-identity",
            Identity::Tagged => "tagged-identity",
        }
    }
}

mod tag {
    pub const ANCHOR: u64 = 0xa3;
    pub const CALIBRATION: u64 = 0xca;
    pub const THEOREM: u64 = 0x7e;
    pub const TREE_LAW: u64 = 0x71;
    pub const MARTINGALE: u64 = 0x3a;
    pub const IMMIGRATION: u64 = 0x1a;
    pub const PALM: u64 = 0xa9;
    pub const BRANCH_GROWTH: u64 = 0xb6;
    pub const COMPARISON: u64 = 0xc0;
}

/// A loaded configuration with its chain and solver.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub hash: String,
    pub chain: DomainChain,
    pub solver: PdeSolver,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self, VerifyError> {
        config.validate()?;
        let solver = config.solver()?;
        Ok(Self {
            hash: config.hash(),
            chain: solver.chain().clone(),
            solver,
            config,
        })
    }

    fn seed(&self, tag: u64) -> u64 {
        child_seed(self.config.seed, &[tag])
    }

    fn region(&self) -> Region {
        Region::Sub(self.config.level)
    }

    fn center(&self) -> Point {
        self.chain.shape().center()
    }

    fn tagged(&self, est: EstimatorResult) -> EstimatorResult {
        EstimatorResult {
            config_hash: self.hash.clone(),
            ..est
        }
    }

    /// Exact subset-calculus identities, in rational arithmetic where the
    /// identity is algebraic.
    pub fn combinatorics(&self) -> Report {
        let mut r = Report::new("combinatorics", self, false);
        r.push(Check::holds("alternating subset sums vanish off the diagonal (n ≤ 6)", alternating_sums_hold(6)));
        r.push(Check::holds("product expansion (exact, up to 6 factors)", product_expansions_hold()));
        let families: Vec<SubsetFamily<BigRational>> = (1..=4).map(rational_family).collect();
        let round_trip = families.iter().all(|u| v_from_u_unchecked(u).and_then(|v| u_from_v(&v)).is_ok_and(|back| &back == u));
        r.push(Check::holds("v from u and back (exact, n ≤ 4)", round_trip));
        let upper = families.iter().all(|u| vupper_relations(u).is_ok_and(|rel| rel.all_hold()));
        r.push(Check::holds("upper-family relations (exact, n ≤ 4)", upper));
        let coefficients = [ratio(1, 1), ratio(1, 3), ratio(-2, 5)];
        let recurrence = coefficients.iter().all(|a| {
            set_recurrence_check(8, a) && c_sequence(8, a).iter().enumerate().all(|(i, c)| *c == c_closed_form(i + 1, a))
        });
        r.push(Check::holds("set recurrence equals binomial recurrence and closed form (k ≤ 8)", recurrence));
        let rows: Vec<_> = (1..=4).flat_map(|n| partition_regrouping(n, &ratio(1, 2))).collect();
        let regroup = rows.iter().all(|row| row.routes_agree() && row.regrouping_holds() == (row.m <= 2));
        r.push(Check::holds("partition coefficients; regrouped form exact for m ≤ 2 only", regroup));
        let worst = expansion_gap(3);
        r.push(Check::at_most("truncated alternating expansion (n ≤ 3)", worst, 1e-10));
        r
    }

    /// Residuals, comparison principle, radial oracle and nesting.
    pub fn pde_suite(&self) -> Result<Report, VerifyError> {
        let th = &self.config.thresholds;
        let mut r = Report::new("pde", self, false);
        let one = |_: Point| 1.0;
        let g = self.solver.solve_dirichlet(Region::Full, &one)?;
        let mut worst = self.solver.semilinear_residual(Region::Full, &g, &one)?;
        for region in self.chain.regions().collect::<Vec<_>>() {
            let w = self.solver.solve_dirichlet(region, &one)?;
            worst = worst.max(self.solver.semilinear_residual(region, &w, &one)?);
        }

        // comparison and maximum principles on random trigonometric data
        let center = self.center();
        let cases = self.config.reps.comparison_cases;
        let mut rng = stream(self.seed(tag::COMPARISON), &[]);
        let (mut order_gap, mut range_gap) = (0.0f64, 0.0f64);
        for _ in 0..cases {
            let coef: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bump: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..0.5)).collect();
            let scale = rng.random_range(0.5..4.0);
            let angle = move |p: Point| (p.y - center.y).atan2(p.x - center.x);
            let lower = {
                let coef = coef.clone();
                move |p: Point| {
                    let t = angle(p);
                    let raw = coef[0] + (1..=3).map(|j| coef[2 * j - 1] * (j as f64 * t).cos() + coef[2 * j] * (j as f64 * t).sin()).sum::<f64>();
                    scale * (raw + 7.0) / 14.0
                }
            };
            let upper = |p: Point| lower(p) + 0.05 + bump[0] + bump[1] * angle(p).cos().powi(2) + bump[2] * angle(p).sin().powi(2);
            let wl = self.solver.solve_dirichlet(Region::Full, &lower)?;
            worst = worst.max(self.solver.semilinear_residual(Region::Full, &wl, &lower)?);
            let wu = self.solver.solve_dirichlet(Region::Full, &upper)?;
            worst = worst.max(self.solver.semilinear_residual(Region::Full, &wu, &upper)?);
            let top = boundary_max(&upper, center);
            for (a, b) in wl.values().iter().zip(wu.values()) {
                order_gap = order_gap.max(a - b);
                range_gap = range_gap.max(-a).max(-b).max(b - top * (1.0 + 1e-9));
            }
        }
        r.push(Check::at_most("Newton residual, every solve", worst, th.residual_max));
        r.push(Check::at_most(format!("comparison principle, {cases} random data pairs"), order_gap.max(0.0), th.comparison_tol));
        r.push(Check::at_most("maximum principle, same solves", range_gap.max(0.0), th.comparison_tol));

        match self.chain.shape() {
            Shape::Disk { center: c, radius } if self.chain.shape().center() == *c => {
                let oracle = radial_center_value(*radius, 1.0);
                r.push(Check::at_most("centre value against radial shooting", (g.at(*c) - oracle).abs(), th.oracle_tol).note(format!("oracle {oracle:.8}")));
            }
            _ => r.push(Check::holds("centre value against radial shooting", true).note("skipped: domain is not a disk")),
        }
        let depth = self.chain.depth();
        let mut nest = 0.0f64;
        for k in 2..=depth {
            for j in 1..k {
                nest = nest.max(self.solver.markov_nesting_check(&one, j, k)?);
            }
        }
        if depth >= 2 {
            r.push(Check::at_most("nesting of exit problems (node trace)", nest, th.nesting_max));
        }
        Ok(r)
    }

    /// `ŵ_g(x) = g(x)` at every level up to 3, with `ψ = g` on `∂D_k`.
    pub fn anchor(&self) -> Result<Report, VerifyError> {
        let th = &self.config.thresholds;
        let fields = self.config.scenario.transform(&self.solver)?;
        let g = &fields.g;
        let x = self.config.point;
        let target = g.at(x);
        let psi = |p: Point| g.at(p).max(0.0);
        let levels: Vec<usize> = (1..=self.chain.depth().min(3)).collect();
        let psis: Vec<(Region, &(dyn Fn(Point) -> f64 + Sync))> = levels.iter().map(|&k| (Region::Sub(k), &psi as &(dyn Fn(Point) -> f64 + Sync))).collect();
        let seed = self.seed(tag::ANCHOR);
        let est = estimate_w_many(&self.chain, x, &psis, &self.config.particles, self.config.inversion, self.config.reps.sbm, seed)?;
        let mut r = Report::new("anchor", self, false);
        for (k, e) in levels.iter().zip(&est) {
            r.push(Check::at_most(format!("k = {k}: |ŵ_g − g|/SE"), e.z_against_value(target), th.z_max).note(format!("ŵ = {:.5} ± {:.5}, g = {target:.5}", e.mean, e.se)));
            r.push(Check::at_most(format!("k = {k}: SE/g"), e.se / target, th.se_rel_max));
        }
        let discarded = est.first().map_or(0, |e| e.discarded);
        r.push(Check::at_most("discarded replicas (fraction)", discarded as f64 / self.config.reps.sbm as f64, th.flagged_max));
        let est: Vec<EstimatorResult> = est.into_iter().map(|e| self.tagged(e)).collect();
        Ok(r.with_data(serde_json::json!({ "target": target, "estimates": est })))
    }

    /// Scans the branch-rate candidates against the PDE anchor.
    pub fn calibrate(&self) -> Result<(Report, Calibration), VerifyError> {
        let th = &self.config.thresholds;
        let center = self.center();
        let f: Box<dyn Fn(Point) -> f64> = match &self.config.scenario {
            Scenario::DirichletF { f } => Box::new(move |p| f.eval(center, p)),
            _ => Box::new(|_| 1.0),
        };
        let cal = calibrate_beta(
            &self.solver,
            self.config.point,
            &*f,
            Region::Sub(self.config.calibration.level),
            &self.config.calibration.candidates,
            &self.config.particles,
            self.config.reps.sbm,
            self.seed(tag::CALIBRATION),
        )?;
        let mut r = Report::new("calibrate-beta", self, false);
        for p in &cal.points {
            r.push(Check::at_most(format!("β = {}: |ŵ_g − g|/SE", p.beta), p.z, f64::INFINITY).note(format!("ŵ = {:.5} ± {:.5}", p.estimate.mean, p.estimate.se)));
        }
        r.push(Check::at_most(format!("selected β = {}", cal.beta), cal.z, th.z_max));
        let r = r.with_data(&cal);
        Ok((r, cal))
    }

    /// Martingale normalizations and `N_x(M̂_k) = v(x)` at every level, in
    /// PDE form and from the particle system.
    pub fn martingale(&self) -> Result<Report, VerifyError> {
        let th = &self.config.thresholds;
        let fields = self.config.scenario.transform(&self.solver)?;
        let tagged = self.config.tagged_fields(&self.solver)?;
        let x = self.config.point;
        let v = fields.v.at(x);
        let depth = self.chain.depth();
        let mut r = Report::new("martingale", self, false);
        let zero = |_: Point| 0.0;
        for k in 1..=depth {
            let region = Region::Sub(k);
            let tg = self.solver.solve_dirichlet_trace(region, &fields.g)?;
            let tu = self.solver.solve_dirichlet_trace(region, &fields.u)?;
            r.push(Check::at_most(format!("k = {k}: PDE form |w_g − w_u − v| (node trace)"), (tg.at(x) - tu.at(x) - v).abs(), th.nesting_max));
            let g_k = shifted_solution(&self.solver, region, &zero, &fields.g)?;
            let u_k = shifted_solution(&self.solver, region, &zero, &fields.u)?;
            r.push(Check::at_most(format!("k = {k}: re-solved normalizer against v"), (g_k.at(x) - u_k.at(x) - v).abs(), th.normalizer_tol));
            let mh = mhat_lhs(&self.solver, x, &zero, region, &fields)?;
            r.push(Check::at_most(format!("k = {k}: |M̂(φ = 0) − 1|"), (mh - 1.0).abs(), 1e-12));
            let mc = mcheck_lhs(&self.solver, x, &zero, region, &tagged)?;
            r.push(Check::at_most(format!("k = {k}: |M̌(φ = 0) − 1|"), (mc - 1.0).abs(), 1e-12));
        }

        // Monte Carlo form: ŵ_g − ŵ_u from the same replicas, jackknife SE
        let inversion = self.config.inversion;
        let n = self.config.particles.n;
        if inversion == Inversion::Particle && fields.g.max() > n as f64 {
            return Err(VerifyError::Unsupported(format!("particle inversion needs g ≤ n = {n}")));
        }
        let seed = self.seed(tag::MARTINGALE);
        let (g, u) = (&fields.g, &fields.u);
        let rows = sample_runs(&self.chain, x, &self.config.particles, None, Region::Sub(depth), self.config.reps.sbm, seed, |run| {
            (1..=depth)
                .map(|k| {
                    let m = run.measure(k);
                    [inversion.sample(m, &|p| g.at(p).max(0.0)), inversion.sample(m, &|p| u.at(p).max(0.0))]
                })
                .collect::<Vec<_>>()
        })?;
        let valid: Vec<&Vec<[f64; 2]>> = rows.iter().flatten().collect();
        let invert = |m: f64| match inversion {
            Inversion::Log => -m.ln(),
            Inversion::Particle => n as f64 * (1.0 - m.powf(1.0 / n as f64)),
        };
        let mut est = Vec::new();
        for k in 0..depth {
            let col: Vec<[f64; 2]> = valid.iter().map(|row| row[k]).collect();
            let (mean, se) = jackknife(&col, 100, |m| invert(m[0]) - invert(m[1]));
            est.push(self.tagged(EstimatorResult {
                mean,
                se,
                reps: col.len(),
                n: Some(n),
                seed,
                config_hash: String::new(),
                discarded: rows.len() - col.len(),
            }));
        }
        for (k, e) in est.iter().enumerate() {
            r.push(Check::at_most(format!("k = {}: |(ŵ_g − ŵ_u) − v|/SE", k + 1), e.z_against_value(v), th.z_max).note(format!("{:.5} ± {:.5}, v = {v:.5}", e.mean, e.se)));
        }
        let mut spread = 0.0f64;
        for i in 0..est.len() {
            for j in i + 1..est.len() {
                spread = spread.max(est[i].z_against(&est[j]));
            }
        }
        r.push(Check::at_most("constancy across levels (max pairwise z)", spread, th.z_max));
        Ok(r.with_data(serde_json::json!({ "v": v, "estimates": est })))
    }

    /// Deterministic left side against the backbone average of the
    /// semi-analytic Laplace functional.
    pub fn identity(&self, which: Identity) -> Result<Report, VerifyError> {
        let th = &self.config.thresholds;
        let x = self.config.point;
        let region = self.region();
        let level = self.config.level;
        let phi_desc = &self.config.test_function;
        let phi = phi_desc.bind(self.center());
        let transform;
        let tagged;
        let (law, lhs, zero_lhs) = match which {
            Identity::Transform | Identity::Branching => {
                transform = self.config.scenario.transform(&self.solver)?;
                let law = if which == Identity::Transform {
                    TreeLaw::q(&transform)
                } else {
                    TreeLaw::q_hat(&transform, 2.0)
                };
                let lhs = mhat_lhs(&self.solver, x, &phi, region, &transform)?;
                (law, lhs, mhat_lhs(&self.solver, x, &|_| 0.0, region, &transform)?)
            }
            Identity::Tagged => {
                tagged = self.config.tagged_fields(&self.solver)?;
                let lhs = mcheck_lhs(&self.solver, x, &phi, region, &tagged)?;
                (TreeLaw::tagged(&tagged), lhs, mcheck_lhs(&self.solver, x, &|_| 0.0, region, &tagged)?)
            }
        };
        let kill = law.kill_field();
        let w_shift = shifted_solution(&self.solver, region, &phi, kill)?;
        let kill_k = shifted_solution(&self.solver, region, &|_| 0.0, kill)?;
        let root_tag = law.root_tag();
        let seed = self.seed(tag::THEOREM);
        let reps = self.config.reps.trees;
        let rows = grow_many(&self.chain, &law, x, region, &self.config.backbone, reps, seed, |tree| {
            let plan = ImmigrationPlan { tree, kill: &kill_k, level };
            TreeRow {
                valid: tree.is_valid(),
                cover: tree.check_invariants(root_tag).is_ok(),
                value: laplace_semi_analytic(&plan, &w_shift).ok(),
                at_zero: laplace_semi_analytic(&plan, &kill_k).ok(),
                gamma: tree.gamma(level),
            }
        })?;
        let usable: Vec<f64> = rows.iter().filter(|t| t.valid).filter_map(|t| t.value).collect();
        let flagged = reps - usable.len();
        let rhs = self.tagged(EstimatorResult::from_summary(&Summary::from_slice(&usable), seed));
        let zero_exact = rows.iter().all(|t| !t.valid || t.at_zero == Some(1.0));
        let cover = rows.iter().filter(|t| t.cover).count() as f64 / reps as f64;
        let gamma = Summary::from_slice(&rows.iter().map(|t| t.gamma as f64).collect::<Vec<_>>());

        let mut r = Report::new(which.name(), self, false);
        r.push(Check::at_most("φ = 0: |LHS − 1|", (zero_lhs - 1.0).abs(), 1e-12));
        r.push(Check::holds("φ = 0: every tree gives exactly 1", zero_exact));
        r.push(Check::at_most("|LHS − RHS|/SE", rhs.z_against_value(lhs), th.z_max).note(format!("LHS {lhs:.5}, RHS {:.5} ± {:.5}", rhs.mean, rhs.se)));
        r.push(Check::at_most("flagged trees (fraction)", flagged as f64 / reps as f64, th.flagged_max));
        if which == Identity::Tagged {
            r.push(Check::at_least("tag-cover invariant (fraction of trees)", cover, 1.0));
        }
        Ok(r.with_data(serde_json::json!({
            "lhs": lhs,
            "rhs": rhs,
            "flagged": flagged,
            "level": level,
            "test_function": phi_desc,
            "gamma_mean": gamma.mean,
        })))
    }

    /// γ_k histograms and first-branch times of the two single-transform
    /// backbones, a self-test and a mis-rated negative control.
    pub fn tree_law(&self) -> Result<Report, VerifyError> {
        let th = &self.config.thresholds;
        let fields = self.config.scenario.transform(&self.solver)?;
        let level = self.config.level;
        let reps = self.config.reps.tree_law;
        let seed = self.seed(tag::TREE_LAW);
        let q = self.tree_summaries(&TreeLaw::q(&fields), reps, seed)?;
        let q_again = self.tree_summaries(&TreeLaw::q(&fields), reps, seed)?;
        let q_hat = self.tree_summaries(&TreeLaw::q_hat(&fields, 2.0), reps, seed)?;
        let control = self.tree_summaries(&TreeLaw::q_hat(&fields, 4.0), reps, seed)?;
        let compare = |a: &[TreeSummary], b: &[TreeSummary]| -> (TestOutcome, TestOutcome) {
            let chi = chi_square_two_sample(&gamma_bins(a, level, 10), &gamma_bins(b, level, 10));
            let firsts = |s: &[TreeSummary]| s.iter().filter(|t| t.valid).filter_map(|t| first_branch_within(t, level)).collect::<Vec<f64>>();
            let ks = ks_two_sample(&firsts(a), &firsts(b));
            (chi, ks)
        };
        let (chi, ks) = compare(&q, &q_hat);
        let (self_chi, self_ks) = compare(&q, &q_again);
        let (bad_chi, bad_ks) = compare(&q, &control);
        let branching = q.iter().any(|t| t.gamma[level - 1] > 1);
        let mut r = Report::new("tree-law", self, false);
        r.push(Check::holds("branching observed (test not vacuous)", branching));
        r.push(Check::at_least("γ histogram chi-square p", chi.p_value, th.p_min));
        r.push(Check::at_least("first-branch time KS p", ks.p_value, th.p_min));
        r.push(Check::at_least("self-test: identical samples, min p", self_chi.p_value.min(self_ks.p_value), 0.99));
        r.push(Check::at_most("negative control (rate 4v) detected: min p", bad_chi.p_value.min(bad_ks.p_value), th.p_min));
        let stats = |s: &[TreeSummary]| branch_stats(s, level);
        Ok(r.with_data(serde_json::json!({
            "level": level,
            "q": stats(&q),
            "q_hat": stats(&q_hat),
            "control": stats(&control),
            "chi_square": chi,
            "ks": ks,
            "control_chi_square": bad_chi,
            "control_ks": bad_ks,
        })))
    }

    fn tree_summaries(&self, law: &TreeLaw, reps: usize, seed: u64) -> Result<Vec<TreeSummary>, VerifyError> {
        let opts = crate::backbone::GrowOptions {
            record: false,
            ..self.config.backbone.clone()
        };
        Ok(grow_many(&self.chain, law, self.config.point, self.region(), &opts, reps, seed, TreeSummary::of)?)
    }

    /// Realized immigration against the semi-analytic value, tree by tree.
    pub fn immigration(&self) -> Result<Report, VerifyError> {
        let th = &self.config.thresholds;
        let fields = self.config.scenario.transform(&self.solver)?;
        let law = TreeLaw::q(&fields);
        let region = self.region();
        let level = self.config.level;
        let phi = self.config.test_function.bind(self.center());
        let w_shift = shifted_solution(&self.solver, region, &phi, &fields.g)?;
        let kill_k = shifted_solution(&self.solver, region, &|_| 0.0, &fields.g)?;
        let params = cluster_params(self.config.immigration.n, self.config.immigration.step.clone());
        let realizations = self.config.reps.realizations;
        let seed = self.seed(tag::IMMIGRATION);
        let rows = replicate(seed, 0, self.config.reps.immigration_trees, |i, rng| -> Result<TreeTriple, VerifyError> {
            // first valid tree on this replica's stream
            let tree = (0u64..)
                .map(|j| grow_tree(&self.chain, &law, self.config.point, region, &self.config.backbone, child_seed(seed, &[i as u64, j])))
                .find(|t| t.as_ref().map_or(true, BackboneTree::is_valid))
                .expect("unbounded search")?;
            let plan = ImmigrationPlan { tree: &tree, kill: &kill_k, level };
            let semi = laplace_semi_analytic(&plan, &w_shift)?;
            let mut s = Summary::default();
            let mut flagged = 0;
            for _ in 0..realizations {
                let (y, flag) = realize_y(&self.solver, &plan, &params, rng);
                if flag.is_some() {
                    flagged += 1;
                    continue;
                }
                s.push((-y.integrate(&phi)).exp());
            }
            Ok(TreeTriple {
                semi_analytic: semi,
                empirical: s.mean,
                se: s.se(),
                realizations: s.count,
                flagged,
                lines: tree.pruned_nodes(level).count(),
            })
        });
        let rows: Vec<TreeTriple> = rows.into_iter().collect::<Result<_, _>>()?;
        let mut r = Report::new("immigration", self, false);
        for (i, t) in rows.iter().enumerate() {
            let z = crate::stats::z_score(t.empirical - t.semi_analytic, t.se);
            r.push(Check::at_most(format!("tree {i}: |empirical − semi-analytic|/SE"), z, th.z_max).note(format!("{:.4} vs {:.4}", t.empirical, t.semi_analytic)));
        }
        let flagged: usize = rows.iter().map(|t| t.flagged).sum();
        r.push(Check::at_most("flagged realizations (fraction)", flagged as f64 / (realizations * rows.len()) as f64, th.flagged_max));
        Ok(r.with_data(&rows))
    }

    /// First-moment formula and the two-point Palm formula.
    pub fn palm(&self) -> Result<Report, VerifyError> {
        let th = &self.config.thresholds;
        let x = self.config.point;
        let region = self.region();
        let psi = self.config.test_function.bind(self.center());
        let params = &self.config.particles;
        let reps = self.config.reps.palm;
        let seed = self.seed(tag::PALM);
        let fields = self.config.scenario.transform(&self.solver)?;
        let g = &fields.g;
        let phi_g = |p: Point| g.at(p).max(0.0);
        let mut r = Report::new("palm", self, false);
        let (m1, b1) = first_moment_check(&self.chain, x, &psi, region, params, reps, seed)?;
        r.push(Check::at_most("first moment: |E⟨X,ψ⟩ − E ψ(B_τ)|/SE", m1.z_against(&b1), th.z_max).note(format!("{:.5} vs {:.5}", m1.mean, b1.mean)));
        let mut data = vec![serde_json::json!({ "check": "first_moment", "particles": self.tagged(m1), "brownian": self.tagged(b1) })];
        let zero = |_: Point| 0.0;
        for (label, phi) in [("φ = 0", &zero as &(dyn Fn(Point) -> f64 + Sync)), ("φ = g", &phi_g)] {
            let (l, rr) = extended_palm_check(&self.solver, x, phi, &psi, &psi, region, params, reps, child_seed(seed, &[label.len() as u64, data.len() as u64]))?;
            r.push(Check::at_most(format!("two-point, {label}: combined z"), l.z_against(&rr), th.z_max).note(format!("{:.5} vs {:.5}", l.mean, rr.mean)));
            data.push(serde_json::json!({ "check": label, "particles": self.tagged(l), "brownian": self.tagged(rr) }));
        }
        Ok(r.with_data(data))
    }

    /// Branch-count trends: bounded boundary data saturates; a shrinking
    /// arc with growing cap keeps branching in every shell.
    pub fn branch_growth(&self) -> Result<Report, VerifyError> {
        let mut r = Report::new("branch-growth", self, true);
        let (checks, first) = self.branch_growth_at(self.config.pde.h, self.config.backbone.step.dt, "")?;
        let passed = checks.iter().all(|c| c.passed);
        r.checks = checks;
        if passed {
            return Ok(r.with_data(serde_json::json!({ "runs": [first] })));
        }
        // a missing trend only counts once it survives a finer grid and step
        let (h, dt) = (self.config.pde.h / 2.0, self.config.backbone.step.dt / 2.0);
        let (refined, second) = self.branch_growth_at(h, dt, "refined: ")?;
        for c in refined {
            r.push(c);
        }
        Ok(r.with_data(serde_json::json!({ "runs": [first, second] })))
    }

    fn branch_growth_at(&self, h: f64, dt: f64, prefix: &str) -> Result<(Vec<Check>, serde_json::Value), VerifyError> {
        let th = &self.config.thresholds;
        let bg = &self.config.branch_growth;
        let chain = build_chain(self.chain.shape().clone(), bg.depth, self.chain.scale(), self.config.point)?;
        let solver = PdeSolver::new(chain.clone(), h, self.config.pde.newton.clone());
        let reps = self.config.reps.branch_growth;
        let seed = self.seed(tag::BRANCH_GROWTH);
        let opts = crate::backbone::GrowOptions {
            record: false,
            step: self.config.backbone.step.clone().with_dt(dt),
            ..self.config.backbone.clone()
        };
        let x = self.config.point;
        let depth = bg.depth;
        let mut checks = Vec::new();

        let g = solver.solve_dirichlet(Region::Full, &|_| bg.bounded_f)?;
        let fields = TransformFields::new(solver.zero(Region::Full), g)?;
        let trees = grow_many(&chain, &TreeLaw::q(&fields), x, Region::Sub(depth), &opts, reps, seed, TreeSummary::of)?;
        let bounded = branch_stats(&trees, depth);
        let cum = &bounded.cumulative;
        let increment = cum[depth - 1].mean - cum[depth - 2].mean;
        checks.push(
            Check::at_most(format!("{prefix}bounded f = {}: cumulative branch increment, last shell", bg.bounded_f), increment, th.saturation_increment).note(format!(
                "cumulative {}",
                cum.iter().map(|m| format!("{:.4}±{:.4}", m.mean, m.se)).collect::<Vec<_>>().join(", ")
            )),
        );
        checks.push(Check::at_most(format!("{prefix}bounded f: truncated trees (fraction)"), bounded.truncated as f64 / reps as f64, th.flagged_max));

        let mut shells = Vec::new();
        for k in 1..=depth {
            let (arc, cap) = bg.arc_at(k);
            let g = solver.solve_blowup(Region::Full, &[arc], cap)?;
            let fields = TransformFields::new(solver.zero(Region::Full), g)?;
            let trees = grow_many(&chain, &TreeLaw::q(&fields), x, Region::Sub(k), &opts, reps, child_seed(seed, &[k as u64]), TreeSummary::of)?;
            let stats = branch_stats(&trees, k);
            let shell = stats.per_shell[k - 1].clone();
            checks.push(Check::at_least(format!("{prefix}shrinking arc, shell {k}: mean branch events"), shell.mean, th.branch_floor).note(format!(
                "± {:.4}, arc {:.4} rad, cap {cap}, truncated {}",
                shell.se,
                arc.length(),
                stats.truncated
            )));
            shells.push(ShellRow { level: k, arc_length: arc.length(), cap, stats });
        }
        let data = serde_json::json!({ "h": h, "dt": dt, "bounded": bounded, "shrinking_arc": shells });
        Ok((checks, data))
    }

    /// Every hard and soft check of the acceptance suite.
    pub fn all(&self) -> Result<Vec<Report>, VerifyError> {
        Ok(vec![
            self.combinatorics(),
            self.pde_suite()?,
            self.anchor()?,
            self.identity(Identity::Transform)?,
            self.identity(Identity::Branching)?,
            self.tree_law()?,
            self.identity(Identity::Tagged)?,
            self.martingale()?,
            self.immigration()?,
            self.palm()?,
            self.branch_growth()?,
        ])
    }
}

struct TreeRow {
    valid: bool,
    cover: bool,
    value: Option<f64>,
    at_zero: Option<f64>,
    gamma: usize,
}

/// Per-tree triple of the immigration check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeTriple {
    pub semi_analytic: f64,
    pub empirical: f64,
    pub se: f64,
    pub realizations: usize,
    pub flagged: usize,
    pub lines: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShellRow {
    pub level: usize,
    pub arc_length: f64,
    pub cap: f64,
    pub stats: BranchStats,
}

/// First branch time when the first branch happens inside `D_level`.
fn first_branch_within(t: &TreeSummary, level: usize) -> Option<f64> {
    let branched_inside = t.branches.get(level - 1).is_some_and(|&b| b > 0);
    if branched_inside {
        t.first_branch
    } else {
        None
    }
}

fn alternating_sums_hold(n: usize) -> bool {
    let full = Subset::full(n);
    full.subsets().all(|c| {
        c.subsets().all(|a| {
            let expected = if a == c { a.sign() } else { 0 };
            alt_subset_sum(a, c) == Ok(expected)
        })
    })
}

fn product_expansions_hold() -> bool {
    (0..=6).all(|len| {
        let w: Vec<BigRational> = (0..len).map(|i| ratio(2 * i as i64 - 3, i as i64 + 2)).collect();
        let (lhs, rhs) = product_expansion(&w);
        lhs == rhs
    })
}

/// A deterministic rational family with distinct, irregular values.
fn rational_family(n: usize) -> SubsetFamily<BigRational> {
    SubsetFamily::from_fn(n, |a| ratio((a.0 as i64 * 37) % 23 - 7, a.len() as i64 + 1)).expect("n ≤ 4")
}

/// Largest gap between the alternating sum of `exp(−⟨X,u^B⟩)` and its
/// truncated partition expansion, over a few admissible atomic examples.
fn expansion_gap(max_n: usize) -> f64 {
    let mut worst = 0.0f64;
    for n in 1..=max_n {
        for case in 0..4 {
            let atoms: Vec<(f64, SubsetFamily<f64>)> = (0..3)
                .map(|j| {
                    let p: Vec<f64> = (0..n).map(|i| 0.05 + 0.07 * ((i + j + case) % 4) as f64).collect();
                    let u = SubsetFamily::from_fn(n, |b| 1.0 - b.elems().iter().map(|&i| 1.0 - p[i - 1]).product::<f64>()).expect("small n");
                    (0.3 + 0.2 * j as f64, u)
                })
                .collect();
            let (lhs, rhs) = mcheck_expansion_check(n, &atoms, 40).expect("admissible");
            worst = worst.max((lhs - rhs).abs());
        }
    }
    worst
}

/// Maximum of `f` on the unit circle about `center`: a fine scan, then
/// golden-section refinement around the best sample.
fn boundary_max(f: &dyn Fn(Point) -> f64, center: Point) -> f64 {
    let at = |t: f64| f(center + Point::new(t.cos(), t.sin()));
    let n = 4096;
    let step = std::f64::consts::TAU / n as f64;
    let best = (0..n).max_by(|&i, &j| at(i as f64 * step).total_cmp(&at(j as f64 * step))).unwrap_or(0);
    let (mut a, mut b) = ((best as f64 - 1.0) * step, (best as f64 + 1.0) * step);
    let r = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..60 {
        let (c, d) = (b - r * (b - a), a + r * (b - a));
        if at(c) > at(d) {
            b = d;
        } else {
            a = c;
        }
    }
    at(0.5 * (a + b)).max(at(best as f64 * step))
}

/// `w(0)` for the radial problem `w'' + w'/r = 4w²` on the disk of the
/// given radius with `w = boundary` on the rim, by RK4 shooting and
/// bisection on `w(0)`.
pub fn radial_center_value(radius: f64, boundary: f64) -> f64 {
    let end_value = |a: f64| {
        let r0 = 1e-4 * radius;
        let mut r = r0;
        let mut y = [a + a * a * r0 * r0, 2.0 * a * a * r0];
        let steps = 20_000;
        let dr = (radius - r0) / steps as f64;
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
        if end_value(mid) > boundary {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TestFunction;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::acceptance();
        cfg.pde.h = 1.0 / 16.0;
        cfg.branch_growth.arc_length = std::f64::consts::PI;
        cfg.reps.sbm = 400;
        cfg.reps.trees = 400;
        cfg.reps.tree_law = 400;
        cfg.reps.immigration_trees = 2;
        cfg.reps.realizations = 100;
        cfg.reps.palm = 400;
        cfg.reps.branch_growth = 50;
        cfg.reps.comparison_cases = 3;
        cfg.particles.n = 16;
        cfg.backbone.step = cfg.backbone.step.clone().with_dt(1e-3);
        cfg
    }

    #[test]
    fn combinatorics_all_exact() {
        let exp = Experiment::new(small()).unwrap();
        let r = exp.combinatorics();
        assert!(r.passed, "{}", r.table());
        assert_eq!(r.checks.len(), 7);
    }

    #[test]
    fn radial_oracle_scales_with_radius() {
        // w_R(r) = w_1(r/R)/R² solves the problem on the disk of radius R
        // with boundary value boundary/R²
        let a = radial_center_value(1.0, 1.0);
        let b = radial_center_value(2.0, 0.25);
        assert!((a - 4.0 * b).abs() < 1e-9, "{a} {b}");
        assert!(a > 0.0 && a < 1.0);
    }

    #[test]
    fn reports_are_reproducible() {
        let exp = Experiment::new(small()).unwrap();
        let a = exp.identity(Identity::Transform).unwrap();
        let b = exp.identity(Identity::Transform).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.config_hash, exp.hash);
        assert!(a.checks[0].passed && a.checks[1].passed);
    }

    #[test]
    fn equal_fields_give_zero_martingale() {
        // u = g makes v vanish; the transform is undefined and says so
        let exp = Experiment::new(small()).unwrap();
        let g = exp.solver.solve_dirichlet(Region::Full, &|_| 1.0).unwrap();
        let f = TransformFields::new(g.clone(), g).unwrap();
        assert_eq!(f.v.max(), 0.0);
        assert!(matches!(
            mhat_lhs(&exp.solver, Point::ORIGIN, &|_| 1.0, Region::Sub(1), &f),
            Err(ImmigrationError::ZeroNormalizer(_))
        ));
    }

    #[test]
    fn bounded_small_data_branch_rarely() {
        // rate 2v ≤ 2·‖f‖, so E[branches] ≤ 2‖f‖·E[duration] < 1
        let exp = Experiment::new(small()).unwrap();
        let g = exp.solver.solve_dirichlet(Region::Full, &|_| 0.1).unwrap();
        let f = TransformFields::new(exp.solver.zero(Region::Full), g).unwrap();
        let opts = crate::backbone::GrowOptions {
            record: false,
            ..Default::default()
        };
        let trees = grow_many(&exp.chain, &TreeLaw::q(&f), Point::ORIGIN, Region::Sub(3), &opts, 300, 3, TreeSummary::of).unwrap();
        let s = branch_stats(&trees, 3);
        assert!(s.cumulative[2].mean < 1.0);
    }

    #[test]
    fn tree_law_detects_the_control() {
        let mut cfg = small();
        cfg.reps.tree_law = 1500;
        let exp = Experiment::new(cfg).unwrap();
        let r = exp.tree_law().unwrap();
        let control = r.checks.iter().find(|c| c.label.starts_with("negative control")).unwrap();
        assert!(control.passed, "{}", r.table());
        let selftest = r.checks.iter().find(|c| c.label.starts_with("self-test")).unwrap();
        assert!(selftest.passed && selftest.value > 0.999);
    }

    #[test]
    fn small_suite_runs() {
        let mut cfg = small();
        cfg.test_function = TestFunction::Constant { value: 0.5 };
        let exp = Experiment::new(cfg).unwrap();
        let pde = exp.pde_suite().unwrap();
        assert_eq!(pde.checks.len(), 5, "{}", pde.table());
        for r in [exp.martingale().unwrap(), exp.immigration().unwrap(), exp.palm().unwrap(), exp.identity(Identity::Tagged).unwrap()] {
            assert!(!r.checks.is_empty());
            assert!(r.checks.iter().all(|c| c.value.is_finite()), "{}", r.table());
            assert!(r.table().contains(&r.name));
        }
    }
}
