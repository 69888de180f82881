//! Conditioned backbone trees. Every line of a tree is an h-transformed
//! Brownian motion with drift `∇log h`; at an interior event it is replaced
//! by two lines started at the same point and time.
//!
//! * `Q`: h = v = g − u for the process killed at rate 4g. Since
//!   `½Δv − 4gv = −2v²`, the residual death rate is `2v`; every death
//!   produces two children.
//! * `Q̂`: h = v for the process killed at rate 2(u + g), for which v is
//!   harmonic; lines branch at rate `2v`.
//! * tagged: a line tagged `A` uses h = v_A for the process killed at rate
//!   `4u^N`; the residual death rate is `2Σ_{B∪C=A} v_B v_C / v_A` over
//!   ordered pairs, and the children's tags are drawn from the split law.

use crate::diffusion::{advance, EventKind, Leg, Motion, ParticlePath, StepControl, Terminal, Vertex};
use crate::field::{grad_log, ScalarField, VectorField};
use crate::geometry::{DomainChain, GeometryError, Point, Region};
use crate::rng::{child_seed, replicate, stream};
use crate::stats::Summary;
use crate::subsets::{sample_split, v_from_u, Subset, SubsetError, SubsetFamily};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

/// Floor applied to `h` before taking `∇log h`.
pub const DRIFT_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Subset(#[from] SubsetError),
    #[error("h-function is not positive at the start point ({value})")]
    NonPositiveStart { value: f64 },
    #[error("u exceeds g by {excess} at {point}")]
    NotOrdered { point: Point, excess: f64 },
    #[error("fields are on different grids")]
    GridMismatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Construction {
    Q,
    QHat,
    Tagged,
}

/// `u ≤ g` with `v = g − u` and the drift `∇log v`.
#[derive(Clone, Debug)]
pub struct TransformFields {
    pub u: ScalarField,
    pub g: ScalarField,
    pub v: ScalarField,
    pub drift: VectorField,
}

impl TransformFields {
    pub fn new(u: ScalarField, g: ScalarField) -> Result<Self, BackboneError> {
        if u.grid() != g.grid() {
            return Err(BackboneError::GridMismatch);
        }
        let v = g.zip_with(&u, "v", |a, b| a - b).map_err(|_| BackboneError::GridMismatch)?;
        // tolerate solver-level noise only
        let (lo, _) = v.interior_extrema();
        if lo < -1e-8 {
            let k = v.values().iter().position(|&x| x == lo).unwrap_or(0);
            return Err(BackboneError::NotOrdered {
                point: v.grid().point(k),
                excess: -lo,
            });
        }
        let v = v.map("v", |x| x.max(0.0));
        let drift = grad_log(&v, DRIFT_FLOOR);
        Ok(Self { u, g, v, drift })
    }
}

/// The subset family `u^A`, the derived `v_A` (checked nonnegative) and
/// their drifts.
#[derive(Clone, Debug)]
pub struct TaggedFields {
    pub u: SubsetFamily<ScalarField>,
    pub v: SubsetFamily<ScalarField>,
    pub drifts: SubsetFamily<VectorField>,
}

impl TaggedFields {
    pub fn new(u: SubsetFamily<ScalarField>) -> Result<Self, BackboneError> {
        let v = v_from_u(&u)?;
        let v = v.map(|a, f| f.map(format!("v_{}", a.key()), |x| x.max(0.0)));
        let drifts = v.map(|_, f| grad_log(f, DRIFT_FLOOR));
        Ok(Self { u, v, drifts })
    }

    pub fn u_full(&self) -> &ScalarField {
        self.u.get(self.u.ground())
    }

    pub fn v_full(&self) -> &ScalarField {
        self.v.get(self.v.ground())
    }
}

#[derive(Clone, Debug)]
struct Line {
    drift: VectorField,
    rate: ScalarField,
}

/// Everything needed to grow trees of one construction.
#[derive(Clone, Debug)]
pub struct TreeLaw {
    construction: Construction,
    lines: SubsetFamily<Line>,
    /// `v_A` per tag, for the split law; singleton family for Q and Q̂.
    v: SubsetFamily<ScalarField>,
    /// Kill field of the mass immigrated along the tree.
    kill: ScalarField,
    event: EventKind,
}

impl TreeLaw {
    pub fn q(fields: &TransformFields) -> Self {
        let rate = fields.v.map("2v", |v| 2.0 * v);
        Self::single(Construction::Q, fields, rate, EventKind::Kill)
    }

    /// `Q̂` with branch rate `factor·v`; the construction uses `factor = 2`.
    pub fn q_hat(fields: &TransformFields, factor: f64) -> Self {
        let rate = fields.v.map("branch", |v| factor * v);
        Self::single(Construction::QHat, fields, rate, EventKind::Branch)
    }

    fn single(construction: Construction, fields: &TransformFields, rate: ScalarField, event: EventKind) -> Self {
        let line = Line {
            drift: fields.drift.clone(),
            rate,
        };
        Self {
            construction,
            lines: SubsetFamily::from_fn(1, |_| line.clone()).expect("n = 1"),
            v: SubsetFamily::from_fn(1, |_| fields.v.clone()).expect("n = 1"),
            kill: fields.g.clone(),
            event,
        }
    }

    pub fn tagged(fields: &TaggedFields) -> Self {
        let v = &fields.v;
        let lines = v.map(|a, va| {
            let pairs: Vec<(Subset, Subset)> = a
                .nonempty_subsets()
                .flat_map(|b| a.nonempty_subsets().map(move |c| (b, c)))
                .filter(|(b, c)| b.union(*c) == a)
                .collect();
            let values = (0..va.values().len())
                .map(|k| {
                    let d = va.values()[k];
                    if d <= 0.0 {
                        return 0.0;
                    }
                    let s: f64 = pairs.iter().map(|(b, c)| v.get(*b).values()[k] * v.get(*c).values()[k]).sum();
                    2.0 * s / d
                })
                .collect();
            Line {
                drift: fields.drifts.get(a).clone(),
                rate: ScalarField::from_values(va.grid().clone(), values, va.domain().clone(), format!("rate_{}", a.key())),
            }
        });
        Self {
            construction: Construction::Tagged,
            lines,
            v: v.clone(),
            kill: fields.u_full().clone(),
            event: EventKind::Kill,
        }
    }

    pub fn construction(&self) -> Construction {
        self.construction
    }

    pub fn root_tag(&self) -> Subset {
        self.v.ground()
    }

    pub fn kill_field(&self) -> &ScalarField {
        &self.kill
    }

    pub fn h(&self, tag: Subset) -> &ScalarField {
        self.v.get(tag)
    }

    pub fn rate(&self, tag: Subset) -> &ScalarField {
        &self.lines.get(tag).rate
    }

    fn split(&self, tag: Subset, at: Point, uniform: f64) -> Result<(Subset, Subset), SubsetError> {
        if self.construction != Construction::Tagged {
            return Ok((tag, tag));
        }
        let vals = self.v.map(|_, f| f.at(at).max(0.0));
        sample_split(&vals, tag, uniform)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeEnd {
    Branched { time: f64, point: Point, children: [usize; 2] },
    Exited { level: usize, time: f64, point: Point },
    /// Not expanded: the node budget ran out.
    Truncated,
    Aborted { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub tag: Subset,
    pub birth_time: f64,
    pub birth_point: Point,
    /// Smallest level not yet left at birth.
    pub birth_level: usize,
    pub path: ParticlePath,
    pub end: NodeEnd,
}

impl TreeNode {
    /// Time the line crossed `∂D_level`, if it did.
    pub fn exit_time(&self, level: usize) -> Option<f64> {
        self.path.crossing(level).map(|c| c.time)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeFlag {
    Budget,
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneTree {
    pub construction: Construction,
    pub target_level: usize,
    pub nodes: Vec<TreeNode>,
    pub flag: Option<TreeFlag>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrowOptions {
    pub step: StepControl,
    /// Maximum number of nodes per tree.
    pub node_budget: usize,
    /// Keep path vertices (needed for path integrals).
    pub record: bool,
}

impl Default for GrowOptions {
    fn default() -> Self {
        Self {
            step: StepControl::default(),
            node_budget: 100_000,
            record: true,
        }
    }
}

struct Pending {
    id: usize,
    parent: Option<usize>,
    tag: Subset,
    time: f64,
    point: Point,
    level: usize,
}

/// Grows one tree from `x` until every line has left `target` (or died
/// without offspring, which no construction here does). Depth-first; node
/// `i` draws from the stream `(seed, i)`.
pub fn grow_tree(
    chain: &DomainChain,
    law: &TreeLaw,
    x: Point,
    target: Region,
    opts: &GrowOptions,
    seed: u64,
) -> Result<BackboneTree, BackboneError> {
    let root_tag = law.root_tag();
    let h0 = law.h(root_tag).at(x);
    if !(h0 > 0.0) {
        return Err(BackboneError::NonPositiveStart { value: h0 });
    }
    let leg0 = Leg::from_point(chain, x, target)?;
    let target_level = leg0.target;
    let mut nodes: Vec<Option<TreeNode>> = Vec::new();
    let mut stack = vec![Pending {
        id: 0,
        parent: None,
        tag: root_tag,
        time: 0.0,
        point: x,
        level: leg0.level,
    }];
    nodes.push(None);
    let mut flag = None;
    while let Some(p) = stack.pop() {
        if nodes.len() > opts.node_budget {
            flag = Some(TreeFlag::Budget);
            nodes[p.id] = Some(TreeNode {
                id: p.id,
                parent: p.parent,
                tag: p.tag,
                birth_time: p.time,
                birth_point: p.point,
                birth_level: p.level,
                path: empty_path(p.time, p.point, p.level),
                end: NodeEnd::Truncated,
            });
            continue;
        }
        let mut rng = stream(seed, &[p.id as u64]);
        let line = law.lines.get(p.tag);
        let rate = |y: Point| line.rate.at(y).max(0.0);
        let motion = Motion {
            drift: Some(&line.drift),
            rate: Some(&rate),
            clock: None,
            event: law.event,
        };
        let mut leg = Leg {
            start: p.point,
            t0: p.time,
            level: p.level,
            target: target_level,
        };
        let mut path = advance(chain, leg, &motion, &opts.step, &mut rng, opts.record);
        let end = loop {
            match path.terminal.clone() {
                Terminal::Exited { level, time, point } => break NodeEnd::Exited { level, time, point },
                Terminal::Killed { time, point } | Terminal::Branched { time, point } => {
                    match law.split(p.tag, point, rng.random()) {
                        Ok((b, c)) => {
                            let ids = [nodes.len(), nodes.len() + 1];
                            nodes.push(None);
                            nodes.push(None);
                            // push the second child first so the first is grown first
                            for (&id, tag) in ids.iter().zip([b, c]).rev() {
                                stack.push(Pending {
                                    id,
                                    parent: Some(p.id),
                                    tag,
                                    time,
                                    point,
                                    level: path.end_level,
                                });
                            }
                            break NodeEnd::Branched { time, point, children: ids };
                        }
                        Err(SubsetError::ZeroDenominator { .. }) => {
                            // no admissible split here: keep going from the event point
                            leg = Leg {
                                start: point,
                                t0: time,
                                level: path.end_level,
                                target: target_level,
                            };
                            let more = advance(chain, leg, &motion, &opts.step, &mut rng, opts.record);
                            append_path(&mut path, more);
                        }
                        Err(e) => {
                            flag = Some(TreeFlag::Aborted);
                            break NodeEnd::Aborted { reason: e.to_string() };
                        }
                    }
                }
                Terminal::Capped { .. } => {
                    flag.get_or_insert(TreeFlag::Aborted);
                    break NodeEnd::Aborted {
                        reason: "step cap".to_string(),
                    };
                }
                Terminal::Aborted { reason, .. } => {
                    flag.get_or_insert(TreeFlag::Aborted);
                    break NodeEnd::Aborted { reason };
                }
            }
        };
        nodes[p.id] = Some(TreeNode {
            id: p.id,
            parent: p.parent,
            tag: p.tag,
            birth_time: p.time,
            birth_point: p.point,
            birth_level: p.level,
            path,
            end,
        });
    }
    Ok(BackboneTree {
        construction: law.construction,
        target_level,
        nodes: nodes.into_iter().map(|n| n.expect("every node resolved")).collect(),
        flag,
    })
}

fn empty_path(t: f64, p: Point, level: usize) -> ParticlePath {
    ParticlePath {
        start_level: level,
        vertices: vec![Vertex { t, p }],
        crossings: vec![],
        terminal: Terminal::Capped { time: t, point: p },
        end_level: level,
        steps: 0,
        rate_integral: 0.0,
    }
}

fn append_path(path: &mut ParticlePath, more: ParticlePath) {
    let skip = usize::from(!path.vertices.is_empty());
    path.vertices.extend(more.vertices.into_iter().skip(skip));
    path.crossings.extend(more.crossings);
    path.terminal = more.terminal;
    path.end_level = more.end_level;
    path.steps += more.steps;
    path.rate_integral += more.rate_integral;
}

/// Grows `reps` trees in parallel; tree `i` uses the seed `(seed, [tag, i])`
/// and is reduced by `f` in the worker.
pub fn grow_many<T: Send>(
    chain: &DomainChain,
    law: &TreeLaw,
    x: Point,
    target: Region,
    opts: &GrowOptions,
    reps: usize,
    seed: u64,
    f: impl Fn(&BackboneTree) -> T + Sync + Send,
) -> Result<Vec<T>, BackboneError> {
    Leg::from_point(chain, x, target)?;
    let tag = law.construction as u64 + 0x7e;
    let out = replicate(seed, tag, reps, |i, _| {
        let tree = grow_tree(chain, law, x, target, opts, child_seed(seed, &[tag, i as u64])).expect("start checked");
        f(&tree)
    });
    Ok(out)
}

impl BackboneTree {
    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    pub fn is_valid(&self) -> bool {
        self.flag.is_none()
    }

    /// Nodes of the tree pruned at `∂D_level`.
    pub fn pruned_nodes(&self, level: usize) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().filter(move |n| n.birth_level <= level)
    }

    /// Number of lines of the pruned tree that leave `D_level`.
    pub fn gamma(&self, level: usize) -> usize {
        assert!(level <= self.target_level, "tree grown only to level {}", self.target_level);
        self.pruned_nodes(level).filter(|n| n.path.crossing(level).is_some()).count()
    }

    /// Branch events of the pruned tree at `level`.
    pub fn branch_count(&self, level: usize) -> usize {
        self.pruned_nodes(level)
            .filter(|n| matches!(n.end, NodeEnd::Branched { .. }) && n.path.end_level <= level)
            .count()
    }

    /// Time of the first branch event inside `D_level`, if any.
    pub fn first_branch_time(&self, level: usize) -> Option<f64> {
        let root = self.root();
        match root.end {
            NodeEnd::Branched { time, .. } if root.path.end_level <= level => Some(time),
            _ => None,
        }
    }

    /// `Σ_lines ∫ f ds` over the pruned tree (left Riemann sums, the last
    /// step cut at the crossing time).
    pub fn integral(&self, level: usize, f: impl Fn(Point) -> f64) -> f64 {
        let mut total = 0.0;
        for n in self.pruned_nodes(level) {
            let stop = n.exit_time(level).unwrap_or(f64::INFINITY);
            for w in n.path.vertices.windows(2) {
                if w[0].t >= stop {
                    break;
                }
                total += f(w[0].p) * (w[1].t.min(stop) - w[0].t);
            }
        }
        total
    }

    /// Total time spent by the pruned tree.
    pub fn occupation(&self, level: usize) -> f64 {
        self.integral(level, |_| 1.0)
    }

    /// The tree pruned at `level`: paths cut at their crossing of
    /// `∂D_level`, later nodes removed, ids renumbered.
    pub fn prune(&self, level: usize) -> BackboneTree {
        let mut map = vec![usize::MAX; self.nodes.len()];
        let kept: Vec<&TreeNode> = self.pruned_nodes(level).collect();
        for (new, n) in kept.iter().enumerate() {
            map[n.id] = new;
        }
        let nodes = kept
            .iter()
            .map(|n| {
                let mut node = (*n).clone();
                node.id = map[n.id];
                node.parent = n.parent.map(|p| map[p]);
                if let Some(c) = n.path.crossing(level).copied() {
                    let path = &mut node.path;
                    path.vertices.retain(|v| v.t < c.time);
                    if !n.path.vertices.is_empty() {
                        path.vertices.push(Vertex { t: c.time, p: c.point });
                    }
                    path.crossings.retain(|x| x.level <= level);
                    path.terminal = Terminal::Exited {
                        level,
                        time: c.time,
                        point: c.point,
                    };
                    path.end_level = level + 1;
                    node.end = NodeEnd::Exited {
                        level,
                        time: c.time,
                        point: c.point,
                    };
                } else if let NodeEnd::Branched { time, point, children } = node.end {
                    node.end = NodeEnd::Branched {
                        time,
                        point,
                        children: children.map(|c| map[c]),
                    };
                }
                node
            })
            .collect();
        BackboneTree {
            construction: self.construction,
            target_level: level,
            nodes,
            flag: self.flag.clone(),
        }
    }

    /// Structural checks: binary branching with children born where and
    /// when the parent ended, tags covering the parent's tag, root tag
    /// `root_tag`, and `γ` nondecreasing in the level.
    pub fn check_invariants(&self, root_tag: Subset) -> Result<(), String> {
        if self.root().tag != root_tag {
            return Err(format!("root tag {} differs from {}", self.root().tag, root_tag));
        }
        for n in &self.nodes {
            if n.tag.is_empty() {
                return Err(format!("node {} has an empty tag", n.id));
            }
            if let NodeEnd::Branched { time, point, children } = n.end {
                let [a, b] = children.map(|c| &self.nodes[c]);
                for c in [a, b] {
                    if c.parent != Some(n.id) || c.birth_time != time || c.birth_point != point {
                        return Err(format!("child {} of {} is not born at its parent's end", c.id, n.id));
                    }
                    if !c.tag.is_subset_of(n.tag) {
                        return Err(format!("child tag {} not inside {}", c.tag, n.tag));
                    }
                }
                if a.tag.union(b.tag) != n.tag {
                    return Err(format!("children of {} do not cover {}", n.id, n.tag));
                }
            }
        }
        if self.is_valid() {
            let g: Vec<usize> = (1..=self.target_level).map(|k| self.gamma(k)).collect();
            if g.windows(2).any(|w| w[1] < w[0]) {
                return Err(format!("gamma decreases across levels: {g:?}"));
            }
        }
        Ok(())
    }

    /// Tags of the lines leaving `D_level`; their union is the root tag.
    pub fn leaf_tags(&self, level: usize) -> Vec<Subset> {
        self.pruned_nodes(level)
            .filter(|n| n.path.crossing(level).is_some())
            .map(|n| n.tag)
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string(self)
    }
}

/// Per-tree summary used by the statistics below; cheap to keep for many
/// trees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeSummary {
    pub valid: bool,
    pub truncated: bool,
    /// `γ_k` for `k = 1..=target`.
    pub gamma: Vec<usize>,
    /// Cumulative branch counts of the pruned trees, `k = 1..=target`.
    pub branches: Vec<usize>,
    pub first_branch: Option<f64>,
}

impl TreeSummary {
    pub fn of(tree: &BackboneTree) -> Self {
        let levels = 1..=tree.target_level;
        Self {
            valid: tree.is_valid(),
            truncated: tree.flag == Some(TreeFlag::Budget),
            gamma: levels.clone().map(|k| tree.gamma(k)).collect(),
            branches: levels.map(|k| tree.branch_count(k)).collect(),
            first_branch: tree.first_branch_time(tree.target_level),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl From<&Summary> for MeanSe {
    fn from(s: &Summary) -> Self {
        Self { mean: s.mean, se: s.se() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchStats {
    pub level: usize,
    pub trees: usize,
    pub truncated: usize,
    pub aborted: usize,
    /// `gamma_hist[i]` counts trees with `γ_k = i`.
    pub gamma_hist: Vec<u64>,
    pub gamma_mean: MeanSe,
    /// Mean cumulative branch count of the pruned tree at each level.
    pub cumulative: Vec<MeanSe>,
    /// Mean branch count per shell `D_j ∖ D_{j−1}` (by the line's level).
    pub per_shell: Vec<MeanSe>,
}

/// γ histogram at `level` and branch counts per shell. Truncated trees
/// count toward the shells they completed, not toward γ; aborted trees are
/// dropped.
pub fn branch_stats(trees: &[TreeSummary], level: usize) -> BranchStats {
    let mut hist = Vec::new();
    let mut gamma = Summary::default();
    let depth = trees.iter().map(|t| t.branches.len()).max().unwrap_or(0);
    let mut cumulative = vec![Summary::default(); depth];
    let mut per_shell = vec![Summary::default(); depth];
    let (mut truncated, mut aborted) = (0, 0);
    for t in trees {
        if t.truncated {
            truncated += 1;
        } else if !t.valid {
            aborted += 1;
            continue;
        }
        if !t.truncated {
            let g = t.gamma[level - 1];
            if hist.len() <= g {
                hist.resize(g + 1, 0);
            }
            hist[g] += 1;
            gamma.push(g as f64);
        }
        for j in 0..t.branches.len() {
            if t.truncated && j + 1 == t.branches.len() {
                break;
            }
            cumulative[j].push(t.branches[j] as f64);
            let prev = if j == 0 { 0 } else { t.branches[j - 1] };
            per_shell[j].push((t.branches[j] - prev) as f64);
        }
    }
    BranchStats {
        level,
        trees: trees.len(),
        truncated,
        aborted,
        gamma_hist: hist,
        gamma_mean: MeanSe::from(&gamma),
        cumulative: cumulative.iter().map(MeanSe::from).collect(),
        per_shell: per_shell.iter().map(MeanSe::from).collect(),
    }
}

impl BranchStats {
    pub fn write_gamma_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "gamma,count")?;
        for (g, c) in self.gamma_hist.iter().enumerate() {
            writeln!(out, "{g},{c}")?;
        }
        Ok(())
    }
}

/// γ histogram over bins `1..=max_bin` with the tail pooled into the last.
pub fn gamma_bins(trees: &[TreeSummary], level: usize, max_bin: usize) -> Vec<u64> {
    let mut bins = vec![0u64; max_bin];
    for t in trees.iter().filter(|t| t.valid) {
        let g = t.gamma[level - 1].clamp(1, max_bin);
        bins[g - 1] += 1;
    }
    bins
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_chain, Shape};
    use crate::pde::{NewtonOptions, PdeSolver};
    use crate::stats::{chi_square_two_sample, ks_two_sample};
    use proptest::prelude::*;

    fn setup(h: f64) -> (DomainChain, PdeSolver) {
        let chain = build_chain(Shape::unit_disk(), 3, 1.0, Point::ORIGIN).unwrap();
        let solver = PdeSolver::new(chain.clone(), h, NewtonOptions::default());
        (chain, solver)
    }

    fn bounded_fields(solver: &PdeSolver, level: f64) -> TransformFields {
        let g = solver.solve_dirichlet(Region::Full, &|_| level).unwrap();
        TransformFields::new(solver.zero(Region::Full), g).unwrap()
    }

    #[test]
    fn zero_rate_gives_a_single_line() {
        let (chain, solver) = setup(1.0 / 16.0);
        let fields = bounded_fields(&solver, 1.0);
        let law = TreeLaw::q_hat(&fields, 0.0);
        for s in 0..20 {
            let t = grow_tree(&chain, &law, Point::ORIGIN, Region::Sub(3), &GrowOptions::default(), s).unwrap();
            assert_eq!(t.nodes.len(), 1);
            assert_eq!((t.gamma(1), t.gamma(2), t.gamma(3)), (1, 1, 1));
            assert_eq!(t.branch_count(3), 0);
        }
    }

    #[test]
    fn trees_satisfy_invariants_and_pruning_commutes() {
        let (chain, solver) = setup(1.0 / 32.0);
        let fields = bounded_fields(&solver, 3.0);
        for law in [TreeLaw::q(&fields), TreeLaw::q_hat(&fields, 2.0)] {
            let mut branched = 0;
            for s in 0..100 {
                let t = grow_tree(&chain, &law, Point::new(0.1, 0.0), Region::Sub(3), &GrowOptions::default(), s).unwrap();
                assert!(t.is_valid());
                t.check_invariants(Subset::full(1)).unwrap();
                branched += usize::from(t.nodes.len() > 1);
                let direct = t.prune(1);
                assert_eq!(t.prune(2).prune(1), direct);
                assert_eq!(direct.gamma(1), t.gamma(1));
                assert!((direct.occupation(1) - t.occupation(1)).abs() < 1e-12);
                for n in &direct.nodes {
                    if let NodeEnd::Exited { level, point, .. } = n.end {
                        assert_eq!(level, 1);
                        assert!(chain.signed_distance(Region::Sub(1), point).abs() < 1e-9);
                    }
                }
            }
            assert!(branched > 10);
        }
    }

    #[test]
    fn trees_are_reproducible() {
        let (chain, solver) = setup(1.0 / 16.0);
        let law = TreeLaw::q(&bounded_fields(&solver, 3.0));
        let a = grow_tree(&chain, &law, Point::ORIGIN, Region::Sub(2), &GrowOptions::default(), 42).unwrap();
        let b = grow_tree(&chain, &law, Point::ORIGIN, Region::Sub(2), &GrowOptions::default(), 42).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn node_budget_truncates() {
        let (chain, solver) = setup(1.0 / 16.0);
        let law = TreeLaw::q_hat(&bounded_fields(&solver, 1.0), 2000.0);
        let opts = GrowOptions {
            node_budget: 50,
            ..GrowOptions::default()
        };
        let t = grow_tree(&chain, &law, Point::ORIGIN, Region::Sub(3), &opts, 1).unwrap();
        assert_eq!(t.flag, Some(TreeFlag::Budget));
        assert!(t.nodes.len() <= 52);
        assert!(t.nodes.iter().any(|n| n.end == NodeEnd::Truncated));
    }

    #[test]
    fn q_and_q_hat_share_the_pruned_law() {
        let (chain, solver) = setup(1.0 / 32.0);
        let fields = bounded_fields(&solver, 4.0);
        let opts = GrowOptions {
            record: false,
            ..GrowOptions::default()
        };
        let run = |law: &TreeLaw, seed| grow_many(&chain, law, Point::ORIGIN, Region::Sub(2), &opts, 3000, seed, TreeSummary::of).unwrap();
        let q = run(&TreeLaw::q(&fields), 1);
        let qh = run(&TreeLaw::q_hat(&fields, 2.0), 2);
        let chi = chi_square_two_sample(&gamma_bins(&q, 2, 10), &gamma_bins(&qh, 2, 10));
        assert!(chi.p_value > 0.01, "{chi:?}");
        let times = |s: &[TreeSummary]| s.iter().map(|t| t.first_branch.unwrap_or(f64::INFINITY)).collect::<Vec<_>>();
        assert!(ks_two_sample(&times(&q), &times(&qh)).p_value > 0.01);
        let wrong = run(&TreeLaw::q_hat(&fields, 4.0), 3);
        let chi = chi_square_two_sample(&gamma_bins(&q, 2, 10), &gamma_bins(&wrong, 2, 10));
        assert!(chi.p_value < 0.01, "{chi:?}");
    }

    #[test]
    fn tagged_with_one_element_is_q() {
        let (chain, solver) = setup(1.0 / 16.0);
        let g = solver.solve_dirichlet(Region::Full, &|_| 2.0).unwrap();
        let fields = bounded_fields(&solver, 2.0);
        let tagged = TaggedFields::new(SubsetFamily::from_fn(1, |_| g.clone()).unwrap()).unwrap();
        let a = TreeLaw::tagged(&tagged);
        let b = TreeLaw::q(&fields);
        for s in 0..10 {
            let ta = grow_tree(&chain, &a, Point::ORIGIN, Region::Sub(2), &GrowOptions::default(), s).unwrap();
            let tb = grow_tree(&chain, &b, Point::ORIGIN, Region::Sub(2), &GrowOptions::default(), s).unwrap();
            assert_eq!(ta.nodes, tb.nodes);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn gamma_is_monotone_in_level(seed in 0u64..10_000) {
            let (chain, solver) = setup(1.0 / 16.0);
            let law = TreeLaw::q(&bounded_fields(&solver, 5.0));
            let t = grow_tree(&chain, &law, Point::ORIGIN, Region::Sub(3), &GrowOptions::default(), seed).unwrap();
            let g: Vec<usize> = (1..=3).map(|k| t.gamma(k)).collect();
            prop_assert!(g.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(g[0] >= 1);
        }
    }
}
