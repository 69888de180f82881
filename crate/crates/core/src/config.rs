//! Experiment configuration: one TOML file drives every solver, simulation
//! and verification run.

use crate::backbone::{BackboneError, GrowOptions, TaggedFields, TransformFields};
use crate::diffusion::StepControl;
use crate::field::ScalarField;
use crate::geometry::{build_chain, BoundaryArc, DomainChain, GeometryError, Point, Region, Shape};
use crate::pde::{NewtonOptions, PdeError, PdeSolver};
use crate::subsets::SubsetFamily;
use crate::superprocess::{Inversion, SbmParams};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::PI;
use std::path::Path;
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("unsupported schema_version {found} (expected {SCHEMA_VERSION})")]
    Version { found: u32 },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default)]
    pub domain: DomainConfig,
    #[serde(default)]
    pub pde: PdeConfig,
    /// Particle system for the exit-measure estimates.
    #[serde(default)]
    pub particles: SbmParams,
    #[serde(default)]
    pub inversion: Inversion,
    #[serde(default = "default_backbone")]
    pub backbone: GrowOptions,
    pub scenario: Scenario,
    /// Arc family for the tagged construction when `scenario` is not
    /// itself `tagged-arcs`.
    #[serde(default)]
    pub tagged: ArcFamily,
    #[serde(default)]
    pub test_function: TestFunction,
    /// Evaluation point `x`.
    #[serde(default)]
    pub point: Point,
    /// Level `k` of the theorem checks.
    #[serde(default = "default_level")]
    pub level: usize,
    #[serde(default)]
    pub reps: Reps,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub immigration: ImmigrationConfig,
    #[serde(default)]
    pub branch_growth: BranchGrowthConfig,
}

fn default_level() -> usize {
    2
}

fn default_backbone() -> GrowOptions {
    GrowOptions {
        step: StepControl::default().with_dt(2.5e-4),
        ..GrowOptions::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainConfig {
    pub shape: Shape,
    pub depth: usize,
    pub scale: f64,
}

impl Default for DomainConfig {
    fn default() -> Self {
        Self {
            shape: Shape::unit_disk(),
            depth: 3,
            scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdeConfig {
    /// Grid spacing.
    pub h: f64,
    pub newton: NewtonOptions,
}

impl Default for PdeConfig {
    fn default() -> Self {
        Self {
            h: 1.0 / 32.0,
            newton: NewtonOptions {
                tol: 1e-10,
                ..NewtonOptions::default()
            },
        }
    }
}

/// Boundary function, evaluated on the boundary of whichever region it is
/// paired with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestFunction {
    Constant { value: f64 },
    /// `max(0, c0 + cx·x + cy·y)`.
    Affine { c0: f64, cx: f64, cy: f64 },
    /// `value` on the arcs (by polar angle about the shape's center), 0 elsewhere.
    Arcs { arcs: Vec<BoundaryArc>, value: f64 },
}

impl Default for TestFunction {
    fn default() -> Self {
        TestFunction::Constant { value: 1.0 }
    }
}

impl TestFunction {
    pub fn eval(&self, center: Point, p: Point) -> f64 {
        match self {
            TestFunction::Constant { value } => *value,
            TestFunction::Affine { c0, cx, cy } => (c0 + cx * p.x + cy * p.y).max(0.0),
            TestFunction::Arcs { arcs, value } => {
                if arcs.iter().any(|a| a.contains_direction(center, p)) {
                    *value
                } else {
                    0.0
                }
            }
        }
    }

    pub fn bind(&self, center: Point) -> impl Fn(Point) -> f64 + Sync + '_ {
        move |p| self.eval(center, p)
    }

    /// Stable identifier for field caches.
    pub fn key(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }

    fn validate(&self, field: &str) -> Result<(), ConfigError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        match self {
            TestFunction::Constant { value } if !ok(*value) => Err(invalid(field, "value must be finite and ≥ 0")),
            TestFunction::Affine { c0, cx, cy } if ![c0, cx, cy].iter().all(|v| v.is_finite()) => {
                Err(invalid(field, "coefficients must be finite"))
            }
            TestFunction::Arcs { value, .. } if !ok(*value) => Err(invalid(field, "value must be finite and ≥ 0")),
            _ => Ok(()),
        }
    }
}

/// Disjoint boundary arcs with a blow-up cap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArcFamily {
    pub arcs: Vec<BoundaryArc>,
    pub cap: f64,
}

impl Default for ArcFamily {
    /// Two opposite quarter arcs.
    fn default() -> Self {
        Self {
            arcs: vec![BoundaryArc::new(0.0, PI / 2.0), BoundaryArc::new(PI, 1.5 * PI)],
            cap: 20.0,
        }
    }
}

impl ArcFamily {
    fn validate(&self, field: &str) -> Result<(), ConfigError> {
        if self.arcs.is_empty() || self.arcs.len() > 8 {
            return Err(invalid(field, "between 1 and 8 arcs are supported"));
        }
        if !(self.cap.is_finite() && self.cap > 0.0) {
            return Err(invalid(field, "cap must be positive"));
        }
        for (i, a) in self.arcs.iter().enumerate() {
            if a.is_empty() || !a.start.is_finite() || !a.end.is_finite() {
                return Err(invalid(&format!("{field}.arcs[{i}]"), "arc must have positive length"));
            }
            for (j, b) in self.arcs.iter().enumerate().skip(i + 1) {
                if a.overlaps(b) {
                    return Err(invalid(&format!("{field}.arcs"), format!("arcs {i} and {j} are not disjoint")));
                }
            }
        }
        Ok(())
    }

    /// `u^A` = capped blow-up on the union of the arcs in `A`.
    pub fn family(&self, solver: &PdeSolver) -> Result<SubsetFamily<ScalarField>, ConfigError> {
        let mut failure = None;
        let family = SubsetFamily::from_fn(self.arcs.len(), |a| {
            let sel: Vec<BoundaryArc> = a.elems().iter().map(|&i| self.arcs[i - 1]).collect();
            solver.solve_blowup(Region::Full, &sel, self.cap).unwrap_or_else(|e| {
                failure.get_or_insert(e);
                solver.zero(Region::Full)
            })
        })
        .expect("validated arc count");
        match failure {
            Some(e) => Err(e.into()),
            None => Ok(family),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum Scenario {
    /// `u = 0`, `g` the solution with boundary data `f`.
    #[serde(rename = "dirichlet-f")]
    DirichletF { f: TestFunction },
    /// `u = 0`, `g` the capped blow-up on the arcs (hitting the arcs).
    #[serde(rename = "blowup-arc")]
    BlowupArc { arcs: Vec<BoundaryArc>, cap: f64 },
    /// `u` the capped blow-up on the arcs, `g` with data `cap` on the arcs
    /// and `f` elsewhere.
    #[serde(rename = "arc-with-data", alias = "example-3.11")]
    ArcWithData { arcs: Vec<BoundaryArc>, cap: f64, f: TestFunction },
    /// Tagged family from disjoint arcs.
    #[serde(rename = "tagged-arcs", alias = "example-4.6")]
    TaggedArcs { arcs: Vec<BoundaryArc>, cap: f64 },
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::DirichletF { .. } => "dirichlet-f",
            Scenario::BlowupArc { .. } => "blowup-arc",
            Scenario::ArcWithData { .. } => "arc-with-data",
            Scenario::TaggedArcs { .. } => "tagged-arcs",
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        match self {
            Scenario::DirichletF { f } => f.validate("scenario.f"),
            Scenario::BlowupArc { arcs, cap } | Scenario::TaggedArcs { arcs, cap } => ArcFamily {
                arcs: arcs.clone(),
                cap: *cap,
            }
            .validate("scenario"),
            Scenario::ArcWithData { arcs, cap, f } => {
                ArcFamily {
                    arcs: arcs.clone(),
                    cap: *cap,
                }
                .validate("scenario")?;
                f.validate("scenario.f")
            }
        }
    }

    /// The `(u, g)` pair of the single-transform constructions. For the
    /// tagged scenario this is `u = 0`, `g = u^N`.
    pub fn transform(&self, solver: &PdeSolver) -> Result<TransformFields, ConfigError> {
        let center = solver.chain().shape().center();
        let zero = solver.zero(Region::Full);
        let (u, g) = match self {
            Scenario::DirichletF { f } => (zero, solver.solve_dirichlet(Region::Full, &f.bind(center))?),
            Scenario::BlowupArc { arcs, cap } => (zero, solver.solve_blowup(Region::Full, arcs, *cap)?),
            Scenario::ArcWithData { arcs, cap, f } => {
                let u = solver.solve_blowup(Region::Full, arcs, *cap)?;
                let data = |p: Point| {
                    if arcs.iter().any(|a| a.contains_direction(center, p)) {
                        *cap
                    } else {
                        f.eval(center, p)
                    }
                };
                (u, solver.solve_dirichlet(Region::Full, &data)?)
            }
            Scenario::TaggedArcs { arcs, cap } => {
                let fam = ArcFamily { arcs: arcs.clone(), cap: *cap };
                let u = fam.family(solver)?;
                (zero, u.get(u.ground()).clone())
            }
        };
        Ok(TransformFields::new(u, g)?)
    }
}

/// Replica counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Reps {
    /// Particle-system replicas per estimate.
    pub sbm: usize,
    /// Backbone trees per theorem check.
    pub trees: usize,
    /// Trees per construction in the tree-law comparison.
    pub tree_law: usize,
    /// Trees in the immigration self-consistency check.
    pub immigration_trees: usize,
    /// Realizations of `Y` per tree.
    pub realizations: usize,
    pub palm: usize,
    /// Trees per level in the branch-growth experiments.
    pub branch_growth: usize,
    /// Random boundary-data cases of the comparison-principle check.
    pub comparison_cases: usize,
}

impl Default for Reps {
    fn default() -> Self {
        Self {
            sbm: 10_000,
            trees: 10_000,
            tree_law: 10_000,
            immigration_trees: 20,
            realizations: 1_000,
            palm: 10_000,
            branch_growth: 2_000,
            comparison_cases: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// Largest accepted `|Δ|/SE`.
    pub z_max: f64,
    /// Smallest accepted p-value of the distribution tests.
    pub p_min: f64,
    /// Largest accepted fraction of flagged trees or replicas.
    pub flagged_max: f64,
    /// Largest accepted `SE / value` of the anchor estimates.
    pub se_rel_max: f64,
    pub residual_max: f64,
    /// Centre value against the radial shooting oracle.
    pub oracle_tol: f64,
    pub nesting_max: f64,
    /// Discrete comparison principle slack.
    pub comparison_tol: f64,
    /// Largest mean cumulative-branch increment counted as saturated.
    pub saturation_increment: f64,
    /// Smallest per-shell branch mean counted as non-vanishing.
    pub branch_floor: f64,
    /// Agreement of the re-solved normalizers with the global fields.
    pub normalizer_tol: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            z_max: 3.0,
            p_min: 0.01,
            flagged_max: 0.01,
            se_rel_max: 0.02,
            residual_max: 1e-8,
            oracle_tol: 1e-4,
            nesting_max: 1e-6,
            comparison_tol: 1e-10,
            saturation_increment: 0.02,
            branch_floor: 0.05,
            normalizer_tol: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub candidates: Vec<f64>,
    pub level: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            candidates: vec![3.0, 3.5, 4.0, 4.5, 5.0],
            level: 1,
        }
    }
}

/// Particle settings of the immigrated clusters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImmigrationConfig {
    pub n: usize,
    pub step: StepControl,
}

impl Default for ImmigrationConfig {
    fn default() -> Self {
        Self {
            n: 32,
            step: StepControl::default().with_dt(1e-3),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BranchGrowthConfig {
    /// Chain depth of the experiments (at least 5).
    pub depth: usize,
    /// Constant boundary value of the bounded-`f` variant.
    pub bounded_f: f64,
    /// Centre angle of the shrinking arcs.
    pub arc_center: f64,
    /// Arc length and cap at level 1; level `k` halves the length and
    /// doubles the cap `k − 1` times.
    pub arc_length: f64,
    pub cap: f64,
}

impl Default for BranchGrowthConfig {
    fn default() -> Self {
        Self {
            depth: 5,
            bounded_f: 0.25,
            arc_center: 0.0,
            arc_length: PI / 2.0,
            cap: 4.0,
        }
    }
}

impl BranchGrowthConfig {
    pub fn arc_at(&self, level: usize) -> (BoundaryArc, f64) {
        let len = self.arc_length / 2f64.powi(level as i32 - 1);
        let cap = self.cap * 2f64.powi(level as i32 - 1);
        (BoundaryArc::new(self.arc_center - len / 2.0, self.arc_center + len / 2.0), cap)
    }
}

impl ExperimentConfig {
    /// The configuration the acceptance suite runs.
    pub fn acceptance() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 20_240_517,
            domain: DomainConfig::default(),
            pde: PdeConfig::default(),
            particles: SbmParams::default(),
            inversion: Inversion::Log,
            backbone: default_backbone(),
            scenario: Scenario::DirichletF {
                f: TestFunction::Constant { value: 1.0 },
            },
            tagged: ArcFamily::default(),
            test_function: TestFunction::default(),
            point: Point::ORIGIN,
            level: 2,
            reps: Reps::default(),
            thresholds: Thresholds::default(),
            calibration: CalibrationConfig::default(),
            immigration: ImmigrationConfig::default(),
            branch_growth: BranchGrowthConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Schema {
            path: "<document>".into(),
            message: e.to_string(),
        })?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::Schema {
                path: if path == "." { "<document>".into() } else { path },
                message: e.inner().message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serializable")
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("serializable");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Version {
                found: self.schema_version,
            });
        }
        let pos = |field: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid(field, format!("must be positive, got {v}")))
            }
        };
        let count = |field: &str, v: usize| if v > 0 { Ok(()) } else { Err(invalid(field, "must be positive")) };
        count("domain.depth", self.domain.depth)?;
        pos("domain.scale", self.domain.scale)?;
        pos("pde.h", self.pde.h)?;
        pos("pde.newton.tol", self.pde.newton.tol)?;
        count("particles.n", self.particles.n)?;
        pos("particles.beta", self.particles.beta)?;
        count("particles.population_cap", self.particles.population_cap)?;
        for (name, step) in [
            ("particles.step", &self.particles.step),
            ("backbone.step", &self.backbone.step),
            ("immigration.step", &self.immigration.step),
        ] {
            pos(&format!("{name}.dt"), step.dt)?;
            pos(&format!("{name}.dt_min"), step.dt_min)?;
            if step.dt_min > step.dt {
                return Err(invalid(&format!("{name}.dt_min"), "must not exceed dt"));
            }
            pos(&format!("{name}.kappa"), step.kappa)?;
            pos(&format!("{name}.drift_ratio"), step.drift_ratio)?;
            pos(&format!("{name}.rate_ratio"), step.rate_ratio)?;
            count(&format!("{name}.max_steps"), step.max_steps)?;
        }
        count("backbone.node_budget", self.backbone.node_budget)?;
        count("immigration.n", self.immigration.n)?;
        self.scenario.validate()?;
        self.tagged.validate("tagged")?;
        self.test_function.validate("test_function")?;
        if self.level == 0 || self.level > self.domain.depth {
            return Err(invalid("level", format!("must lie in 1..={}", self.domain.depth)));
        }
        let r = &self.reps;
        for (name, v) in [
            ("reps.sbm", r.sbm),
            ("reps.trees", r.trees),
            ("reps.tree_law", r.tree_law),
            ("reps.immigration_trees", r.immigration_trees),
            ("reps.realizations", r.realizations),
            ("reps.palm", r.palm),
            ("reps.branch_growth", r.branch_growth),
            ("reps.comparison_cases", r.comparison_cases),
        ] {
            count(name, v)?;
        }
        let t = &self.thresholds;
        for (name, v) in [
            ("thresholds.z_max", t.z_max),
            ("thresholds.p_min", t.p_min),
            ("thresholds.flagged_max", t.flagged_max),
            ("thresholds.se_rel_max", t.se_rel_max),
            ("thresholds.residual_max", t.residual_max),
            ("thresholds.oracle_tol", t.oracle_tol),
            ("thresholds.nesting_max", t.nesting_max),
            ("thresholds.comparison_tol", t.comparison_tol),
            ("thresholds.saturation_increment", t.saturation_increment),
            ("thresholds.branch_floor", t.branch_floor),
            ("thresholds.normalizer_tol", t.normalizer_tol),
        ] {
            pos(name, v)?;
        }
        if self.calibration.candidates.is_empty() {
            return Err(invalid("calibration.candidates", "at least one candidate is needed"));
        }
        for (i, &b) in self.calibration.candidates.iter().enumerate() {
            pos(&format!("calibration.candidates[{i}]"), b)?;
        }
        if self.calibration.level == 0 || self.calibration.level > self.domain.depth {
            return Err(invalid("calibration.level", format!("must lie in 1..={}", self.domain.depth)));
        }
        let b = &self.branch_growth;
        if b.depth < 5 {
            return Err(invalid("branch_growth.depth", "must be at least 5"));
        }
        pos("branch_growth.bounded_f", b.bounded_f)?;
        pos("branch_growth.arc_length", b.arc_length)?;
        pos("branch_growth.cap", b.cap)?;
        if !b.arc_center.is_finite() {
            return Err(invalid("branch_growth.arc_center", "must be finite"));
        }
        // an arc narrower than the grid smears its cap into a spurious
        // branching hot spot
        let innermost = b.arc_at(b.depth).0.length() * self.domain.shape.inradius();
        if innermost < 2.0 * self.pde.h {
            return Err(invalid(
                "branch_growth.arc_length",
                format!("innermost arc spans {innermost:.4}, less than two grid cells of {}", self.pde.h),
            ));
        }
        self.chain()?;
        Ok(())
    }

    pub fn chain(&self) -> Result<DomainChain, GeometryError> {
        build_chain(self.domain.shape.clone(), self.domain.depth, self.domain.scale, self.point)
    }

    pub fn solver(&self) -> Result<PdeSolver, ConfigError> {
        Ok(PdeSolver::new(self.chain()?, self.pde.h, self.pde.newton.clone()))
    }

    /// Tagged fields: the scenario's arcs when it is `tagged-arcs`, else
    /// the `tagged` family.
    pub fn tagged_fields(&self, solver: &PdeSolver) -> Result<TaggedFields, ConfigError> {
        let fam = match &self.scenario {
            Scenario::TaggedArcs { arcs, cap } => ArcFamily { arcs: arcs.clone(), cap: *cap },
            _ => self.tagged.clone(),
        };
        Ok(TaggedFields::new(fam.family(solver)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
seed = 7

[scenario]
kind = "dirichlet-f"
f = { kind = "constant", value = 1.0 }
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.level, 2);
        assert_eq!(cfg.reps.trees, 10_000);
        assert_eq!(cfg.particles.beta, 4.0);
        assert_eq!(cfg.backbone.step.dt, 2.5e-4);
    }

    #[test]
    fn round_trip_keeps_the_hash() {
        let cfg = ExperimentConfig::acceptance();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
        assert_eq!(cfg.hash().len(), 64);
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn unknown_fields_are_rejected_with_their_path() {
        let text = format!("{MINIMAL}\n[reps]\ntrees = 10\nbogus = 1\n");
        match ExperimentConfig::from_toml(&text) {
            Err(ConfigError::Schema { path, message }) => {
                assert_eq!(path, "reps.bogus");
                assert!(message.contains("bogus"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let text = MINIMAL.replace("value = 1.0", "value = 1.0, extra = 2");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(ConfigError::Schema { .. })));
    }

    #[test]
    fn wrong_types_report_the_field_path() {
        let text = format!("{MINIMAL}\n[pde]\nh = \"fine\"\n");
        match ExperimentConfig::from_toml(&text) {
            Err(ConfigError::Schema { path, .. }) => assert_eq!(path, "pde.h"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_and_values_are_checked() {
        let text = MINIMAL.replace("schema_version = 1", "schema_version = 2");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(ConfigError::Version { found: 2 })));
        let text = format!("{MINIMAL}\n[pde]\nh = -0.1\n");
        match ExperimentConfig::from_toml(&text) {
            Err(ConfigError::Invalid { field, .. }) => assert_eq!(field, "pde.h"),
            other => panic!("{other:?}"),
        }
        let text = MINIMAL.replace("seed = 7", "seed = 7\nlevel = 9");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(ConfigError::Invalid { .. })));
    }

    #[test]
    fn overlapping_arcs_are_rejected() {
        let text = r#"
schema_version = 1
seed = 1
[scenario]
kind = "example-4.6"
cap = 10.0
arcs = [{ start = 0.0, end = 1.0 }, { start = 0.5, end = 2.0 }]
"#;
        match ExperimentConfig::from_toml(text) {
            Err(ConfigError::Invalid { field, message }) => {
                assert_eq!(field, "scenario.arcs");
                assert!(message.contains("disjoint"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn scenarios_build_admissible_fields() {
        let mut cfg = ExperimentConfig::acceptance();
        cfg.pde.h = 1.0 / 16.0;
        let solver = cfg.solver().unwrap();
        let arcs = vec![BoundaryArc::new(0.0, 1.0)];
        for sc in [
            cfg.scenario.clone(),
            Scenario::BlowupArc { arcs: arcs.clone(), cap: 10.0 },
            Scenario::ArcWithData {
                arcs: arcs.clone(),
                cap: 10.0,
                f: TestFunction::Constant { value: 0.5 },
            },
            Scenario::TaggedArcs {
                arcs: ArcFamily::default().arcs,
                cap: 10.0,
            },
        ] {
            let f = sc.transform(&solver).unwrap();
            assert!(f.v.at(Point::ORIGIN) > 0.0, "{}", sc.name());
        }
        let t = cfg.tagged_fields(&solver).unwrap();
        assert_eq!(t.u.n(), 2);
    }

    #[test]
    fn arcs_below_grid_resolution_are_rejected() {
        let mut cfg = ExperimentConfig::acceptance();
        cfg.pde.h = 1.0 / 16.0;
        match cfg.validate() {
            Err(ConfigError::Invalid { field, .. }) => assert_eq!(field, "branch_growth.arc_length"),
            other => panic!("{other:?}"),
        }
        cfg.branch_growth.arc_length = PI;
        cfg.validate().unwrap();
    }

    #[test]
    fn shrinking_arcs() {
        let b = BranchGrowthConfig::default();
        let (a1, c1) = b.arc_at(1);
        let (a3, c3) = b.arc_at(3);
        assert!((a1.length() - 4.0 * a3.length()).abs() < 1e-12);
        assert_eq!(c3, 4.0 * c1);
    }

    #[test]
    fn test_functions() {
        let c = Point::ORIGIN;
        let aff = TestFunction::Affine { c0: 0.5, cx: 1.0, cy: 0.0 };
        assert_eq!(aff.eval(c, Point::new(-1.0, 0.0)), 0.0);
        assert_eq!(aff.eval(c, Point::new(1.0, 0.0)), 1.5);
        let arcs = TestFunction::Arcs {
            arcs: vec![BoundaryArc::new(0.0, 0.5)],
            value: 2.0,
        };
        assert_eq!(arcs.eval(c, Point::new(1.0, 0.1)), 2.0);
        assert_eq!(arcs.eval(c, Point::new(-1.0, 0.1)), 0.0);
        assert_ne!(aff.key(), arcs.key());
    }
}
