//! Planar domains, the nested chain `D_1 ⊂ D_2 ⊂ … ⊂ D_K ⊂ D` and exit
//! detection for discretized paths.
//!
//! `D_k = {x ∈ D : dist(x, ∂D) > 2^{-k}·scale}`. For a disk this is a
//! concentric disk, for an axis-aligned rectangle a shrunken rectangle, so
//! every distance and crossing below is computed in closed form.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::ops::{Add, Mul, Sub};
use thiserror::Error;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const ORIGIN: Point = Point { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Point) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, other: Point) -> f64 {
        (self - other).norm()
    }

    /// Point at fraction `t` of the segment `self → other`.
    pub fn lerp(self, other: Point, t: f64) -> Point {
        self + (other - self) * t
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, rhs: Point) -> Point {
        Point::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, rhs: Point) -> Point {
        Point::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, rhs: f64) -> Point {
        Point::new(self.x * rhs, self.y * rhs)
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate shape: {0}")]
    Degenerate(String),
    #[error("chain depth must be at least 1")]
    ZeroDepth,
    #[error("scale must be positive and finite, got {0}")]
    BadScale(f64),
    #[error("subdomain D_{level} is empty for scale {scale}")]
    EmptySubdomain { level: usize, scale: f64 },
    #[error("start point {point} is not inside D_{level}")]
    StartOutside { point: Point, level: usize },
    #[error("segment start {point} is not inside the region (signed distance {signed_distance})")]
    StartNotInside { point: Point, signed_distance: f64 },
}

/// The outer domain `D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Disk { center: Point, radius: f64 },
    Rect { min: Point, max: Point },
}

impl Shape {
    pub fn unit_disk() -> Self {
        Shape::Disk {
            center: Point::ORIGIN,
            radius: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        match *self {
            Shape::Disk { center, radius } => {
                if !(radius.is_finite() && radius > 0.0) || !center.is_finite() {
                    return Err(GeometryError::Degenerate(format!(
                        "disk radius must be positive, got {radius}"
                    )));
                }
            }
            Shape::Rect { min, max } => {
                if !(min.is_finite() && max.is_finite() && max.x > min.x && max.y > min.y) {
                    return Err(GeometryError::Degenerate(format!(
                        "rectangle needs min < max componentwise, got {min} .. {max}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Largest offset for which the shrunken shape is still nonempty.
    pub fn inradius(&self) -> f64 {
        match *self {
            Shape::Disk { radius, .. } => radius,
            Shape::Rect { min, max } => 0.5 * (max.x - min.x).min(max.y - min.y),
        }
    }

    pub fn center(&self) -> Point {
        match *self {
            Shape::Disk { center, .. } => center,
            Shape::Rect { min, max } => (min + max) * 0.5,
        }
    }

    pub fn bounding_box(&self) -> (Point, Point) {
        match *self {
            Shape::Disk { center, radius } => (
                Point::new(center.x - radius, center.y - radius),
                Point::new(center.x + radius, center.y + radius),
            ),
            Shape::Rect { min, max } => (min, max),
        }
    }

    /// Signed distance from `p` to the boundary of `{x : dist(x, ∂D) > offset}`;
    /// positive inside.
    pub fn signed_distance(&self, p: Point, offset: f64) -> f64 {
        match *self {
            Shape::Disk { center, radius } => (radius - offset) - p.dist(center),
            Shape::Rect { min, max } => {
                let (lo, hi) = shrink(min, max, offset);
                let dx = (lo.x - p.x).max(p.x - hi.x);
                let dy = (lo.y - p.y).max(p.y - hi.y);
                if dx <= 0.0 && dy <= 0.0 {
                    // inside: distance to the nearest side
                    -dx.max(dy)
                } else {
                    -Point::new(dx.max(0.0), dy.max(0.0)).norm()
                }
            }
        }
    }

    /// Nearest point of the boundary of the shrunken shape.
    pub fn project(&self, p: Point, offset: f64) -> Point {
        match *self {
            Shape::Disk { center, radius } => {
                let r = radius - offset;
                let d = p - center;
                let n = d.norm();
                if n == 0.0 {
                    center + Point::new(r, 0.0)
                } else {
                    center + d * (r / n)
                }
            }
            Shape::Rect { min, max } => {
                let (lo, hi) = shrink(min, max, offset);
                let inside = p.x > lo.x && p.x < hi.x && p.y > lo.y && p.y < hi.y;
                if !inside {
                    return Point::new(p.x.clamp(lo.x, hi.x), p.y.clamp(lo.y, hi.y));
                }
                let candidates = [
                    (p.x - lo.x, Point::new(lo.x, p.y)),
                    (hi.x - p.x, Point::new(hi.x, p.y)),
                    (p.y - lo.y, Point::new(p.x, lo.y)),
                    (hi.y - p.y, Point::new(p.x, hi.y)),
                ];
                candidates
                    .iter()
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .map(|c| c.1)
                    .unwrap_or(p)
            }
        }
    }

    /// First crossing of the boundary of the shrunken shape by the segment
    /// `a → b`, as (fraction along the segment, crossing point). `a` must lie
    /// strictly inside. A segment ending exactly on the boundary counts as
    /// crossing at fraction 1.
    pub fn first_exit(
        &self,
        a: Point,
        b: Point,
        offset: f64,
    ) -> Result<Option<(f64, Point)>, GeometryError> {
        let sd = self.signed_distance(a, offset);
        if !(sd > 0.0) {
            return Err(GeometryError::StartNotInside {
                point: a,
                signed_distance: sd,
            });
        }
        let d = b - a;
        match *self {
            Shape::Disk { center, radius } => {
                let r = radius - offset;
                let rel = a - center;
                let qa = d.norm_sq();
                if qa == 0.0 {
                    return Ok(None);
                }
                let qb = rel.dot(d);
                let qc = rel.norm_sq() - r * r;
                if (rel + d).norm_sq() < r * r {
                    return Ok(None);
                }
                // qc < 0, so exactly one positive root; pick the stable form.
                let disc = (qb * qb - qa * qc).max(0.0).sqrt();
                let t = if qb >= 0.0 {
                    -qc / (qb + disc)
                } else {
                    (disc - qb) / qa
                };
                let t = t.clamp(0.0, 1.0);
                let hit = self.project(a.lerp(b, t), offset);
                Ok(Some((t, hit)))
            }
            Shape::Rect { min, max } => {
                let (lo, hi) = shrink(min, max, offset);
                let mut t_exit = f64::INFINITY;
                for (start, delta, low, high) in [(a.x, d.x, lo.x, hi.x), (a.y, d.y, lo.y, hi.y)] {
                    if delta > 0.0 {
                        t_exit = t_exit.min((high - start) / delta);
                    } else if delta < 0.0 {
                        t_exit = t_exit.min((low - start) / delta);
                    }
                }
                if t_exit > 1.0 {
                    return Ok(None);
                }
                let t = t_exit.max(0.0);
                let q = a.lerp(b, t);
                Ok(Some((t, Point::new(q.x.clamp(lo.x, hi.x), q.y.clamp(lo.y, hi.y)))))
            }
        }
    }
}

fn shrink(min: Point, max: Point, offset: f64) -> (Point, Point) {
    (
        Point::new(min.x + offset, min.y + offset),
        Point::new(max.x - offset, max.y - offset),
    )
}

/// A member of the chain: `Sub(k)` is `D_k` (1-based), `Full` is `D` itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Sub(usize),
    Full,
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Region::Sub(k) => write!(f, "D_{k}"),
            Region::Full => write!(f, "D"),
        }
    }
}

/// `D` with the nested subdomains `D_1 ⊂ … ⊂ D_K`. Immutable after
/// construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainChain {
    shape: Shape,
    depth: usize,
    scale: f64,
    start: Point,
}

/// Builds the chain and checks every invariant: nonempty nested subdomains
/// all containing `start`.
pub fn build_chain(
    shape: Shape,
    depth: usize,
    scale: f64,
    start: Point,
) -> Result<DomainChain, GeometryError> {
    shape.validate()?;
    if depth == 0 {
        return Err(GeometryError::ZeroDepth);
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(GeometryError::BadScale(scale));
    }
    let chain = DomainChain {
        shape,
        depth,
        scale,
        start,
    };
    // D_1 is the smallest; emptiness of D_1 is the only way the chain can fail.
    if chain.offset(Region::Sub(1)) >= chain.shape.inradius() {
        return Err(GeometryError::EmptySubdomain { level: 1, scale });
    }
    if !chain.contains(Region::Sub(1), start) {
        return Err(GeometryError::StartOutside {
            point: start,
            level: 1,
        });
    }
    Ok(chain)
}

impl DomainChain {
    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn start(&self) -> Point {
        self.start
    }

    /// Distance threshold defining the region: `2^{-k}·scale` for `D_k`, 0 for `D`.
    pub fn offset(&self, region: Region) -> f64 {
        match region {
            Region::Sub(k) => self.scale * 0.5f64.powi(k as i32),
            Region::Full => 0.0,
        }
    }

    /// Level index used by the particle engines: `Sub(k) ↦ k`, `Full ↦ K + 1`.
    pub fn level(&self, region: Region) -> usize {
        match region {
            Region::Sub(k) => k,
            Region::Full => self.depth + 1,
        }
    }

    pub fn region_at(&self, level: usize) -> Region {
        if level > self.depth {
            Region::Full
        } else {
            Region::Sub(level.max(1))
        }
    }

    /// All regions from `D_1` out to `D`.
    pub fn regions(&self) -> impl Iterator<Item = Region> + '_ {
        (1..=self.depth)
            .map(Region::Sub)
            .chain(std::iter::once(Region::Full))
    }

    pub fn check_region(&self, region: Region) -> Result<(), GeometryError> {
        match region {
            Region::Sub(k) if k == 0 || k > self.depth => Err(GeometryError::Degenerate(format!(
                "region D_{k} outside chain of depth {}",
                self.depth
            ))),
            _ => Ok(()),
        }
    }

    pub fn signed_distance(&self, region: Region, p: Point) -> f64 {
        self.shape.signed_distance(p, self.offset(region))
    }

    pub fn contains(&self, region: Region, p: Point) -> bool {
        self.signed_distance(region, p) > 0.0
    }

    pub fn project(&self, region: Region, p: Point) -> Point {
        self.shape.project(p, self.offset(region))
    }

    pub fn first_exit(
        &self,
        segment: (Point, Point),
        region: Region,
    ) -> Result<Option<(f64, Point)>, GeometryError> {
        self.shape
            .first_exit(segment.0, segment.1, self.offset(region))
    }

    /// Region whose annulus contains `p`: the smallest `D_k` containing it.
    pub fn innermost_containing(&self, p: Point) -> Option<Region> {
        self.regions().find(|&r| self.contains(r, p))
    }
}

/// A closed arc of `∂D` given by a polar-angle sector around the shape's
/// center (radians, counterclockwise from `start` to `end`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryArc {
    pub start: f64,
    pub end: f64,
}

impl BoundaryArc {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    /// Angular length in `[0, 2π]`.
    pub fn length(&self) -> f64 {
        let span = self.end - self.start;
        if span >= 2.0 * PI {
            2.0 * PI
        } else {
            span.rem_euclid(2.0 * PI)
        }
    }

    pub fn is_empty(&self) -> bool {
        self.length() == 0.0
    }

    /// Whether the polar angle of `p` about `center` falls in the arc.
    pub fn contains_direction(&self, center: Point, p: Point) -> bool {
        let len = self.length();
        if len >= 2.0 * PI {
            return true;
        }
        let d = p - center;
        let theta = d.y.atan2(d.x);
        (theta - self.start).rem_euclid(2.0 * PI) <= len
    }

    pub fn overlaps(&self, other: &BoundaryArc) -> bool {
        let probe = |arc: &BoundaryArc, angle: f64| {
            (angle - arc.start).rem_euclid(2.0 * PI) <= arc.length()
        };
        probe(self, other.start) || probe(other, self.start)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn unit_chain(depth: usize) -> DomainChain {
        build_chain(Shape::unit_disk(), depth, 1.0, Point::ORIGIN).unwrap()
    }

    #[test]
    fn disk_chain_radii() {
        let chain = unit_chain(3);
        let radii: Vec<f64> = (1..=3)
            .map(|k| 1.0 - chain.offset(Region::Sub(k)))
            .collect();
        assert_eq!(radii, vec![0.5, 0.75, 0.875]);
        assert!(chain.contains(Region::Sub(1), Point::new(0.49, 0.0)));
        assert!(!chain.contains(Region::Sub(1), Point::new(0.5, 0.0)));
    }

    #[test]
    fn empty_first_subdomain_rejected() {
        let err = build_chain(Shape::unit_disk(), 1, 2.0, Point::ORIGIN).unwrap_err();
        assert_eq!(err, GeometryError::EmptySubdomain { level: 1, scale: 2.0 });
    }

    #[test]
    fn degenerate_shapes_rejected() {
        let disk = Shape::Disk {
            center: Point::ORIGIN,
            radius: 0.0,
        };
        assert!(matches!(
            build_chain(disk, 2, 1.0, Point::ORIGIN),
            Err(GeometryError::Degenerate(_))
        ));
        let flat = Shape::Rect {
            min: Point::new(0.0, 0.0),
            max: Point::new(1.0, 0.0),
        };
        assert!(build_chain(flat, 2, 1.0, Point::new(0.5, 0.0)).is_err());
        assert_eq!(
            build_chain(Shape::unit_disk(), 0, 1.0, Point::ORIGIN),
            Err(GeometryError::ZeroDepth)
        );
    }

    #[test]
    fn rectangle_chain_offsets() {
        let rect = Shape::Rect {
            min: Point::new(0.0, 0.0),
            max: Point::new(1.0, 1.0),
        };
        // Level 2 at scale 1 is [0.25, 0.75]², but level 1 would be the empty
        // set {dist > 0.5}, so the chain itself is rejected.
        let offset = 0.25;
        assert_abs_diff_eq!(rect.signed_distance(Point::new(0.5, 0.5), offset), 0.25);
        assert_abs_diff_eq!(rect.signed_distance(Point::new(0.25, 0.5), offset), 0.0);
        assert_abs_diff_eq!(rect.signed_distance(Point::new(0.75, 0.75), offset), 0.0);
        assert!(rect.signed_distance(Point::new(0.8, 0.5), offset) < 0.0);
        assert_eq!(
            build_chain(rect.clone(), 2, 1.0, Point::new(0.5, 0.5)),
            Err(GeometryError::EmptySubdomain { level: 1, scale: 1.0 })
        );
        let chain = build_chain(rect, 2, 0.8, Point::new(0.5, 0.5)).unwrap();
        assert_abs_diff_eq!(chain.signed_distance(Region::Sub(2), Point::new(0.2, 0.5)), 0.0);
        assert_abs_diff_eq!(chain.signed_distance(Region::Sub(1), Point::new(0.5, 0.5)), 0.1);
    }

    #[test]
    fn start_outside_first_subdomain() {
        let err = build_chain(Shape::unit_disk(), 2, 1.0, Point::new(0.6, 0.0)).unwrap_err();
        assert!(matches!(err, GeometryError::StartOutside { level: 1, .. }));
    }

    #[test]
    fn disk_exit_examples() {
        let disk = Shape::unit_disk();
        let (t, p) = disk
            .first_exit(Point::ORIGIN, Point::new(2.0, 0.0), 0.0)
            .unwrap()
            .unwrap();
        assert_abs_diff_eq!(t, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p.x, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.y, 0.0, epsilon = 1e-15);
        assert_eq!(
            disk.first_exit(Point::ORIGIN, Point::new(0.1, 0.1), 0.0).unwrap(),
            None
        );
    }

    #[test]
    fn rectangle_corner_exit() {
        let rect = Shape::Rect {
            min: Point::new(-1.0, -1.0),
            max: Point::new(1.0, 1.0),
        };
        let (t, p) = rect
            .first_exit(Point::ORIGIN, Point::new(1.0, 1.0), 0.0)
            .unwrap()
            .unwrap();
        // clipping oracle: both slabs are left at t = 1
        assert_eq!(t, 1.0);
        assert_eq!(p, Point::new(1.0, 1.0));
    }

    #[test]
    fn exit_from_outside_is_error() {
        let disk = Shape::unit_disk();
        assert!(disk
            .first_exit(Point::new(1.5, 0.0), Point::ORIGIN, 0.0)
            .is_err());
    }

    #[test]
    fn arcs() {
        let q = BoundaryArc::new(0.0, PI / 2.0);
        assert!(q.contains_direction(Point::ORIGIN, Point::new(1.0, 0.5)));
        assert!(!q.contains_direction(Point::ORIGIN, Point::new(-1.0, 0.5)));
        let wrap = BoundaryArc::new(3.0 * PI / 2.0, 2.5 * PI);
        assert!(wrap.contains_direction(Point::ORIGIN, Point::new(1.0, -0.1)));
        assert!(wrap.contains_direction(Point::ORIGIN, Point::new(1.0, 0.1)));
        assert!(q.overlaps(&wrap));
        assert!(!q.overlaps(&BoundaryArc::new(PI, 1.5 * PI)));
    }

    fn shapes() -> impl Strategy<Value = Shape> {
        prop_oneof![
            (0.5f64..2.0).prop_map(|r| Shape::Disk {
                center: Point::new(0.1, -0.2),
                radius: r
            }),
            (0.5f64..2.0, 0.5f64..2.0).prop_map(|(w, h)| Shape::Rect {
                min: Point::new(-w, -h),
                max: Point::new(w, h)
            }),
        ]
    }

    proptest! {
        #[test]
        fn nesting_is_monotone(shape in shapes(), x in -2.0f64..2.0, y in -2.0f64..2.0) {
            let p = Point::new(x, y);
            let center = shape.center();
            let chain = build_chain(shape, 5, 0.4, center).unwrap();
            for k in 2..=5 {
                if chain.contains(Region::Sub(k - 1), p) {
                    prop_assert!(chain.contains(Region::Sub(k), p));
                }
            }
            if chain.contains(Region::Sub(5), p) {
                prop_assert!(chain.contains(Region::Full, p));
            }
        }

        #[test]
        fn exit_consistent_under_subdivision(
            shape in shapes(),
            angle in 0.0f64..(2.0 * PI),
            len in 0.1f64..5.0,
            split in 0.01f64..0.99,
        ) {
            let a = shape.center() + Point::new(0.05, 0.03);
            let b = a + Point::new(angle.cos(), angle.sin()) * len;
            let whole = shape.first_exit(a, b, 0.2).unwrap();
            let mid = a.lerp(b, split);
            let piecewise = match shape.first_exit(a, mid, 0.2).unwrap() {
                Some(hit) => Some(hit.1),
                None => shape.first_exit(mid, b, 0.2).unwrap().map(|h| h.1),
            };
            match (whole, piecewise) {
                (Some((_, p)), Some(q)) => prop_assert!(p.dist(q) < 1e-10),
                (None, None) => {}
                (w, p) => prop_assert!(false, "mismatch {:?} vs {:?}", w, p),
            }
            if let Some((_, p)) = whole {
                prop_assert!(shape.signed_distance(p, 0.2).abs() < 1e-10);
            }
        }
    }
}
