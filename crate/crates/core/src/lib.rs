//! Conditioned exit measures of super-Brownian motion in planar domains.
//!
//! The crate pairs a finite-difference solver for `Δu = 4u²` with
//! branching-particle simulations of the exit measures, the conditioned
//! backbone trees with mass immigrating along them, and a harness that
//! checks the Monte Carlo estimates against the deterministic fields.

pub mod backbone;
pub mod config;
pub mod diffusion;
pub mod field;
pub mod geometry;
pub mod immigration;
pub mod pde;
pub mod rng;
pub mod stats;
pub mod subsets;
pub mod superprocess;
pub mod verify;

pub use backbone::{BackboneTree, Construction, GrowOptions, TaggedFields, TransformFields, TreeLaw};
pub use diffusion::{advance, EventKind, Leg, Motion, ParticlePath, StepControl, Terminal};
pub use field::{grad_log, FieldDomain, FieldError, Grid, ScalarField, VectorField};
pub use geometry::{build_chain, BoundaryArc, DomainChain, GeometryError, Point, Region, Shape};
pub use pde::{NewtonOptions, PdeError, PdeSolver, SolveStats};
pub use subsets::{Subset, SubsetError, SubsetFamily};
pub use rng::{stream, SimRng};
pub use stats::{EstimatorResult, Summary, TestOutcome};
pub use superprocess::{ExitMeasure, Inversion, SbmParams, SbmRun, SuperprocessError};
pub use immigration::{laplace_semi_analytic, mcheck_lhs, mhat_lhs, realize_y, ImmigrationError, ImmigrationPlan};
