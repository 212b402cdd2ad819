//! Planar geometry for convex point sets.
//!
//! Everything here works in plain `f64` with one orientation tolerance,
//! [`EPS`], applied to cross products (squared-pixel units). Cross products
//! with magnitude at or below it are treated as collinear.
//!
//! Degenerate hulls (fewer than three effective vertices, or zero area) are
//! represented explicitly rather than rejected: predicted point sets can
//! collapse early in training and the losses must stay defined.

use std::f64::consts::{FRAC_PI_2, PI};
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::GeomError;

/// Orientation tolerance for cross products.
pub const EPS: f64 = 1e-9;

/// Default number of representative points per query.
pub const DEFAULT_K: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn dot(self, o: Self) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3-D cross product.
    pub fn cross(self, o: Self) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm2(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm2().sqrt()
    }

    /// Rotated by +90 degrees.
    pub fn perp(self) -> Self {
        Self::new(-self.y, self.x)
    }

    pub fn rotate(self, theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

impl Add for Point2 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point2 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Self;
    fn mul(self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s)
    }
}

impl Neg for Point2 {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y)
    }
}

/// Orientation of `c` relative to the directed line `a -> b`; positive when
/// `c` lies to the left.
#[inline]
pub fn orient(a: Point2, b: Point2, c: Point2) -> f64 {
    (b - a).cross(c - a)
}

/// An ordered set of at least three finite points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSet(Vec<Point2>);

impl PointSet {
    pub fn new(points: Vec<Point2>) -> Result<Self, GeomError> {
        if points.len() < 3 {
            return Err(GeomError::TooFewPoints {
                needed: 3,
                got: points.len(),
            });
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(GeomError::NonFinite { index: i });
        }
        Ok(Self(points))
    }

    pub fn from_xy(coords: &[(f64, f64)]) -> Result<Self, GeomError> {
        Self::new(coords.iter().map(|&(x, y)| Point2::new(x, y)).collect())
    }

    pub fn points(&self) -> &[Point2] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<Point2> {
        self.0
    }

    /// Arithmetic mean of the points.
    pub fn centroid(&self) -> Point2 {
        mean(&self.0)
    }
}

impl AsRef<[Point2]> for PointSet {
    fn as_ref(&self) -> &[Point2] {
        &self.0
    }
}

pub(crate) fn mean(points: &[Point2]) -> Point2 {
    let n = points.len() as f64;
    let s = points.iter().fold(Point2::default(), |acc, &p| acc + p);
    Point2::new(s.x / n, s.y / n)
}

/// A convex polygon with counter-clockwise vertices and no collinear
/// vertices. `degenerate` marks hulls of collinear or coincident input,
/// whose area is zero by definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexPolygon {
    vertices: Vec<Point2>,
    degenerate: bool,
}

impl ConvexPolygon {
    /// Builds the convex hull of arbitrary points.
    pub fn hull_of(points: &[Point2]) -> Self {
        convex_hull(points)
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn area(&self) -> f64 {
        polygon_area(self)
    }

    pub fn empty() -> Self {
        Self {
            vertices: Vec::new(),
            degenerate: true,
        }
    }

    /// Inside-or-on test with a signed-distance tolerance in pixels.
    pub fn contains(&self, p: Point2, tol: f64) -> bool {
        let v = &self.vertices;
        match v.len() {
            0 => false,
            1 => (p - v[0]).norm() <= tol,
            _ if self.degenerate => {
                // Distance to the polyline through the vertices.
                (0..v.len()).any(|i| point_segment_distance(p, v[i], v[(i + 1) % v.len()]) <= tol)
            }
            n => (0..n).all(|i| {
                let a = v[i];
                let b = v[(i + 1) % n];
                let len = (b - a).norm();
                orient(a, b, p) / len >= -tol
            }),
        }
    }

    /// Builds a polygon from vertices already known to be CCW and convex.
    /// Zero-area results are flagged degenerate.
    pub(crate) fn from_ccw(vertices: Vec<Point2>) -> Self {
        let degenerate = vertices.len() < 3 || shoelace(&vertices) <= EPS;
        Self {
            vertices,
            degenerate,
        }
    }
}

fn point_segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = b - a;
    let len2 = ab.norm2();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Signed shoelace area (positive for CCW).
pub(crate) fn shoelace(v: &[Point2]) -> f64 {
    let n = v.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        s += v[i].cross(v[(i + 1) % n]);
    }
    0.5 * s
}

/// Jarvis march returning indices of hull vertices in CCW order, starting
/// from the lowest-x (then lowest-y) point.
///
/// With `keep_collinear` the walk stops at every point lying on a hull edge
/// instead of skipping to the farthest one.
pub(crate) fn hull_indices(points: &[Point2], keep_collinear: bool) -> Vec<usize> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let start = (0..n)
        .min_by(|&i, &j| {
            let (a, b) = (points[i], points[j]);
            a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y))
        })
        .unwrap();
    let mut hull = vec![start];
    let mut cur = start;
    loop {
        let pc = points[cur];
        let prev = (hull.len() >= 2).then(|| points[hull[hull.len() - 2]]);
        let mut cand: Option<usize> = None;
        for i in 0..n {
            let pi = points[i];
            if pi == pc {
                continue;
            }
            let Some(c) = cand else {
                cand = Some(i);
                continue;
            };
            let pq = points[c];
            let o = orient(pc, pq, pi);
            if o < -EPS {
                cand = Some(i);
            } else if o.abs() <= EPS {
                let (di, dc) = ((pi - pc).norm2(), (pq - pc).norm2());
                let same_ray = (pi - pc).dot(pq - pc) > 0.0;
                let better = match (keep_collinear, same_ray, prev) {
                    (true, true, _) => di < dc,
                    // Opposite rays: `cur` sits inside a straight run; keep walking forward.
                    (true, false, Some(pv)) => (pi - pc).dot(pc - pv) > 0.0,
                    _ => di > dc,
                };
                if better {
                    cand = Some(i);
                }
            }
        }
        let Some(next) = cand else { break };
        if points[next] == points[start] || hull.len() > n {
            break;
        }
        if keep_collinear && hull.contains(&next) {
            break;
        }
        hull.push(next);
        cur = next;
    }
    if keep_collinear && hull.len() >= 3 && shoelace(&gather(points, &hull)) <= EPS {
        // All points collinear: the nearest-first walk doubles back; use the
        // plain segment hull instead.
        return hull_indices(points, false);
    }
    hull
}

fn gather(points: &[Point2], idx: &[usize]) -> Vec<Point2> {
    idx.iter().map(|&i| points[i]).collect()
}

/// Minimal convex hull (Jarvis march), CCW, collinear points removed.
///
/// Collinear or coincident inputs give a degenerate polygon holding the
/// segment endpoints (or the single point).
pub fn convex_hull(points: &[Point2]) -> ConvexPolygon {
    let idx = hull_indices(points, false);
    ConvexPolygon::from_ccw(gather(points, &idx))
}

/// Shoelace area; zero for degenerate polygons.
pub fn polygon_area(p: &ConvexPolygon) -> f64 {
    if p.degenerate {
        0.0
    } else {
        shoelace(&p.vertices).max(0.0)
    }
}

/// Which supporting line an edge of a clipped polygon lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum EdgeLine {
    /// Edge `i -> i+1` of the subject polygon.
    Subject(usize),
    /// Edge `j -> j+1` of the clip polygon.
    Clip(usize),
}

/// A clipped polygon that remembers, for every edge, the input edge it lies
/// on. `lines[i]` is the line of edge `verts[i] -> verts[i+1]`.
#[derive(Debug, Clone, Default)]
pub(crate) struct LabeledPolygon {
    pub verts: Vec<Point2>,
    pub lines: Vec<EdgeLine>,
    /// Smallest |orientation| seen while classifying vertices against clip
    /// lines. Values near zero mean the intersection is at a kink.
    pub min_margin: f64,
}

/// Successive half-plane clipping of `subject` by every edge of `clip`.
/// Both inputs must be CCW convex vertex lists.
pub(crate) fn clip_labeled(subject: &[Point2], clip: &[Point2]) -> LabeledPolygon {
    let mut out = LabeledPolygon {
        verts: subject.to_vec(),
        lines: (0..subject.len()).map(EdgeLine::Subject).collect(),
        min_margin: f64::INFINITY,
    };
    if subject.len() < 3 || clip.len() < 3 {
        out.verts.clear();
        out.lines.clear();
        return out;
    }
    let m = clip.len();
    let mut verts = Vec::with_capacity(subject.len() + m);
    let mut lines = Vec::with_capacity(subject.len() + m);
    for j in 0..m {
        let (c0, c1) = (clip[j], clip[(j + 1) % m]);
        let n = out.verts.len();
        if n == 0 {
            break;
        }
        verts.clear();
        lines.clear();
        let side: Vec<f64> = out.verts.iter().map(|&p| orient(c0, c1, p)).collect();
        for &d in &side {
            out.min_margin = out.min_margin.min(d.abs());
        }
        for i in 0..n {
            let k = (i + 1) % n;
            let (s, e) = (out.verts[i], out.verts[k]);
            let (ds, de) = (side[i], side[k]);
            let (s_in, e_in) = (ds >= 0.0, de >= 0.0);
            match (s_in, e_in) {
                (true, true) => {
                    verts.push(e);
                    lines.push(out.lines[k]);
                }
                (true, false) => {
                    verts.push(lerp_cut(s, e, ds, de));
                    lines.push(EdgeLine::Clip(j));
                }
                (false, true) => {
                    verts.push(lerp_cut(s, e, ds, de));
                    lines.push(out.lines[i]);
                    verts.push(e);
                    lines.push(out.lines[k]);
                }
                (false, false) => {}
            }
        }
        std::mem::swap(&mut out.verts, &mut verts);
        std::mem::swap(&mut out.lines, &mut lines);
    }
    out
}

fn lerp_cut(s: Point2, e: Point2, ds: f64, de: f64) -> Point2 {
    let denom = ds - de;
    if denom.abs() <= f64::MIN_POSITIVE {
        return s;
    }
    let t = ds / denom;
    s + (e - s) * t
}

/// Orders a pair so that swapping the arguments yields bit-identical work.
fn canonical_pair<'a>(
    a: &'a ConvexPolygon,
    b: &'a ConvexPolygon,
) -> (&'a ConvexPolygon, &'a ConvexPolygon) {
    let key = |p: &ConvexPolygon| -> Vec<(u64, u64)> {
        p.vertices
            .iter()
            .map(|v| (v.x.to_bits(), v.y.to_bits()))
            .collect()
    };
    if key(a) <= key(b) {
        (a, b)
    } else {
        (b, a)
    }
}

/// Intersection region of two convex polygons. Disjoint or merely touching
/// inputs give an empty or degenerate result.
pub fn convex_intersection(a: &ConvexPolygon, b: &ConvexPolygon) -> ConvexPolygon {
    if a.degenerate || b.degenerate {
        return ConvexPolygon::empty();
    }
    let (s, c) = canonical_pair(a, b);
    let clipped = clip_labeled(&s.vertices, &c.vertices);
    ConvexPolygon::from_ccw(dedup_ring(clipped.verts))
}

fn dedup_ring(mut v: Vec<Point2>) -> Vec<Point2> {
    v.dedup_by(|p, q| (*p - *q).norm2() <= EPS * EPS);
    while v.len() > 1 && (v[0] - v[v.len() - 1]).norm2() <= EPS * EPS {
        v.pop();
    }
    v
}

/// Convex hull of the union of both vertex lists.
pub fn enclosing_hull(a: &ConvexPolygon, b: &ConvexPolygon) -> ConvexPolygon {
    let (s, c) = canonical_pair(a, b);
    let mut pts = s.vertices.clone();
    pts.extend_from_slice(&c.vertices);
    convex_hull(&pts)
}

/// Areas entering every IoU-style quantity for one pair of hulls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairAreas {
    pub area_a: f64,
    pub area_b: f64,
    pub intersection: f64,
    pub union: f64,
    pub enclosing: f64,
}

impl PairAreas {
    pub fn of(a: &ConvexPolygon, b: &ConvexPolygon) -> Self {
        let area_a = polygon_area(a);
        let area_b = polygon_area(b);
        let intersection = polygon_area(&convex_intersection(a, b))
            .min(area_a)
            .min(area_b);
        let union = area_a + area_b - intersection;
        let enclosing = polygon_area(&enclosing_hull(a, b)).max(union);
        Self {
            area_a,
            area_b,
            intersection,
            union,
            enclosing,
        }
    }

    pub fn iou(&self) -> f64 {
        if self.union <= 0.0 {
            0.0
        } else {
            (self.intersection / self.union).clamp(0.0, 1.0)
        }
    }
}

/// Either a raw point set (hulled on use) or an already-built hull.
pub trait AsHull {
    fn to_hull(&self) -> ConvexPolygon;
}

impl AsHull for ConvexPolygon {
    fn to_hull(&self) -> ConvexPolygon {
        self.clone()
    }
}

impl AsHull for PointSet {
    fn to_hull(&self) -> ConvexPolygon {
        convex_hull(&self.0)
    }
}

impl AsHull for [Point2] {
    fn to_hull(&self) -> ConvexPolygon {
        convex_hull(self)
    }
}

impl AsHull for RotatedBox {
    fn to_hull(&self) -> ConvexPolygon {
        ConvexPolygon::from_ccw(self.corners().to_vec())
    }
}

/// Intersection over union of two convex hulls; zero when the union is
/// empty.
pub fn convex_hull_iou<A: AsHull + ?Sized, B: AsHull + ?Sized>(a: &A, b: &B) -> f64 {
    PairAreas::of(&a.to_hull(), &b.to_hull()).iou()
}

/// Oriented rectangle. `w` runs along direction `theta`, `h` across it.
///
/// Boxes built through [`RotatedBox::new`] are canonical: `w >= h`,
/// `theta` in `[-pi/2, pi/2)`, and squares take the angle in
/// `[-pi/4, pi/4)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotatedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl RotatedBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<Self, GeomError> {
        if ![cx, cy, w, h, theta].iter().all(|v| v.is_finite()) {
            return Err(GeomError::NonFiniteBox);
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(GeomError::NonPositiveSize { w, h });
        }
        Ok(Self::canonical(cx, cy, w, h, theta))
    }

    /// Canonical form without the positivity check (used for fitted boxes,
    /// which may be flat).
    pub(crate) fn canonical(cx: f64, cy: f64, mut w: f64, mut h: f64, mut theta: f64) -> Self {
        if w < h {
            std::mem::swap(&mut w, &mut h);
            theta += FRAC_PI_2;
        }
        theta = wrap_half_open(theta, PI);
        if (w - h).abs() <= 1e-9 * w.max(h) {
            theta = wrap_half_open(theta, FRAC_PI_2);
        }
        Self {
            cx,
            cy,
            w,
            h,
            theta,
        }
    }

    pub fn center(&self) -> Point2 {
        Point2::new(self.cx, self.cy)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// The four corners in CCW order.
    pub fn corners(&self) -> [Point2; 4] {
        let c = self.center();
        let (hw, hh) = (0.5 * self.w, 0.5 * self.h);
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
            .map(|(x, y)| c + Point2::new(x, y).rotate(self.theta))
    }
}

/// Maps `theta` into `[-period/2, period/2)`.
fn wrap_half_open(theta: f64, period: f64) -> f64 {
    let half = 0.5 * period;
    let mut t = theta - period * ((theta + half) / period).floor();
    if t >= half {
        t -= period;
    }
    if t < -half {
        t += period;
    }
    t
}

pub fn box_to_corners(b: &RotatedBox) -> PointSet {
    PointSet(b.corners().to_vec())
}

/// Result of fitting a rectangle to a point set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RectFit {
    pub rect: RotatedBox,
    /// Set when the hull was degenerate; `rect.h` (and possibly `rect.w`)
    /// is then zero.
    pub degenerate: bool,
}

/// Minimum-area enclosing rectangle by rotating calipers: one side of the
/// optimal rectangle is collinear with a hull edge, so only hull edge
/// directions are tried.
pub fn min_area_rect(points: &[Point2]) -> Result<RectFit, GeomError> {
    if points.is_empty() {
        return Err(GeomError::TooFewPoints { needed: 1, got: 0 });
    }
    if let Some(i) = points.iter().position(|p| !p.is_finite()) {
        return Err(GeomError::NonFinite { index: i });
    }
    let hull = convex_hull(points);
    let v = hull.vertices();
    if hull.is_degenerate() {
        let rect = match v.len() {
            1 => RotatedBox::canonical(v[0].x, v[0].y, 0.0, 0.0, 0.0),
            _ => {
                let (a, b) = (v[0], v[v.len() - 1]);
                let far = v
                    .iter()
                    .copied()
                    .max_by(|p, q| (*p - a).norm2().total_cmp(&(*q - a).norm2()))
                    .unwrap_or(b);
                let d = far - a;
                let mid = (a + far) * 0.5;
                RotatedBox::canonical(mid.x, mid.y, d.norm(), 0.0, d.y.atan2(d.x))
            }
        };
        return Ok(RectFit {
            rect,
            degenerate: true,
        });
    }
    let n = v.len();
    let mut best: Option<(f64, RotatedBox)> = None;
    for i in 0..n {
        let e = v[(i + 1) % n] - v[i];
        let u = e * (1.0 / e.norm());
        let nrm = u.perp();
        let (mut lo_u, mut hi_u, mut lo_n, mut hi_n) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &p in v {
            let (pu, pn) = (p.dot(u), p.dot(nrm));
            lo_u = lo_u.min(pu);
            hi_u = hi_u.max(pu);
            lo_n = lo_n.min(pn);
            hi_n = hi_n.max(pn);
        }
        let (w, h) = (hi_u - lo_u, hi_n - lo_n);
        let area = w * h;
        if best.as_ref().is_none_or(|(a, _)| area < *a) {
            let c = u * (0.5 * (lo_u + hi_u)) + nrm * (0.5 * (lo_n + hi_n));
            best = Some((area, RotatedBox::canonical(c.x, c.y, w, h, u.y.atan2(u.x))));
        }
    }
    Ok(RectFit {
        rect: best.expect("non-degenerate hull has edges").1,
        degenerate: false,
    })
}

/// Convenience angle helper: difference of two box angles modulo `period`,
/// mapped into `[-period/2, period/2)`.
pub fn angle_diff(a: f64, b: f64, period: f64) -> f64 {
    wrap_half_open(a - b, period)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_4;

    fn pts(c: &[(f64, f64)]) -> Vec<Point2> {
        c.iter().map(|&(x, y)| Point2::new(x, y)).collect()
    }

    fn square(x0: f64, y0: f64, s: f64) -> ConvexPolygon {
        convex_hull(&pts(&[(x0, y0), (x0 + s, y0), (x0 + s, y0 + s), (x0, y0 + s)]))
    }

    #[test]
    fn hull_drops_interior_point() {
        let h = convex_hull(&pts(&[(0., 0.), (1., 0.), (1., 1.), (0., 1.), (0.5, 0.5)]));
        assert!(!h.is_degenerate());
        assert_eq!(h.vertices(), pts(&[(0., 0.), (1., 0.), (1., 1.), (0., 1.)]).as_slice());
    }

    #[test]
    fn hull_drops_edge_points() {
        let h = convex_hull(&pts(&[(0., 0.), (0.5, 0.), (1., 0.), (1., 1.), (0., 1.), (0., 0.5)]));
        assert_eq!(h.vertices().len(), 4);
    }

    #[test]
    fn collinear_hull_is_degenerate_segment() {
        let h = convex_hull(&pts(&[(0., 0.), (1., 1.), (2., 2.)]));
        assert!(h.is_degenerate());
        assert_eq!(h.vertices(), pts(&[(0., 0.), (2., 2.)]).as_slice());
        assert_eq!(polygon_area(&h), 0.0);
    }

    #[test]
    fn coincident_points_give_single_vertex() {
        let h = convex_hull(&pts(&[(3., 4.), (3., 4.), (3., 4.)]));
        assert!(h.is_degenerate());
        assert_eq!(h.vertices().len(), 1);
    }

    #[test]
    fn keep_collinear_visits_edge_points() {
        let p = pts(&[(0., 0.), (0.5, 0.), (1., 0.), (1., 1.), (0., 1.)]);
        let idx = hull_indices(&p, true);
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
        let seg = pts(&[(0., 0.), (1., 1.), (2., 2.)]);
        assert_eq!(hull_indices(&seg, true).len(), 2);
    }

    #[test]
    fn unit_square_area() {
        assert_eq!(polygon_area(&square(0., 0., 1.)), 1.0);
    }

    #[test]
    fn intersection_cases() {
        let a = square(0., 0., 1.);
        let same = convex_intersection(&a, &a);
        assert!((polygon_area(&same) - 1.0).abs() < 1e-12);

        let far = square(2., 0., 1.);
        assert_eq!(polygon_area(&convex_intersection(&a, &far)), 0.0);

        let touching = square(1., 0., 1.);
        assert_eq!(polygon_area(&convex_intersection(&a, &touching)), 0.0);

        let big = square(0., 0., 2.);
        let shifted = square(1., 1., 2.);
        let i = convex_intersection(&big, &shifted);
        assert!((polygon_area(&i) - 1.0).abs() < 1e-12);
        for v in i.vertices() {
            assert!(v.x >= 1.0 - 1e-12 && v.x <= 2.0 + 1e-12);
        }
    }

    #[test]
    fn enclosing_cases() {
        let big = square(0., 0., 3.);
        let small = square(1., 1., 1.);
        assert_eq!(enclosing_hull(&small, &big).vertices(), big.vertices());
        let a = square(0., 0., 1.);
        let b = square(2., 0., 1.);
        let r = enclosing_hull(&a, &b);
        assert_eq!(r.vertices(), pts(&[(0., 0.), (3., 0.), (3., 1.), (0., 1.)]).as_slice());
    }

    #[test]
    fn iou_cases() {
        let a = square(0., 0., 2.);
        let b = square(1., 1., 2.);
        assert_eq!(convex_hull_iou(&a, &a), 1.0);
        assert_eq!(convex_hull_iou(&a, &square(5., 5., 1.)), 0.0);
        assert!((convex_hull_iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
        let seg = convex_hull(&pts(&[(0., 0.), (1., 1.)]));
        assert_eq!(convex_hull_iou(&seg, &seg), 0.0);
    }

    #[test]
    fn box_corners_examples() {
        let b = RotatedBox::new(0.5, 0.5, 1.0, 1.0, 0.0).unwrap();
        assert_eq!(
            box_to_corners(&b).points(),
            pts(&[(0., 0.), (1., 0.), (1., 1.), (0., 1.)]).as_slice()
        );
        let s2 = 2f64.sqrt();
        let d = RotatedBox::new(0.0, 0.0, s2, s2, FRAC_PI_4).unwrap();
        let c = box_to_corners(&d);
        for want in pts(&[(1., 0.), (0., 1.), (-1., 0.), (0., -1.)]) {
            assert!(c.points().iter().any(|p| (*p - want).norm() < 1e-12), "{want:?}");
        }
    }

    #[test]
    fn canonical_box_orientation() {
        let b = RotatedBox::new(0.0, 0.0, 1.0, 3.0, 0.2).unwrap();
        assert_eq!((b.w, b.h), (3.0, 1.0));
        assert!((b.theta - (0.2 + FRAC_PI_2 - PI)).abs() < 1e-12);
        let b = RotatedBox::new(0.0, 0.0, 3.0, 1.0, FRAC_PI_2).unwrap();
        assert_eq!(b.theta, -FRAC_PI_2);
        assert!(RotatedBox::new(0.0, 0.0, 0.0, 1.0, 0.0).is_err());
        assert!(RotatedBox::new(f64::NAN, 0.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn min_rect_of_square_corners() {
        let fit = min_area_rect(&pts(&[(0., 0.), (1., 0.), (1., 1.), (0., 1.)])).unwrap();
        assert!(!fit.degenerate);
        let r = fit.rect;
        assert!((r.cx - 0.5).abs() < 1e-12 && (r.cy - 0.5).abs() < 1e-12);
        assert!((r.w - 1.0).abs() < 1e-12 && (r.h - 1.0).abs() < 1e-12);
        assert!(r.theta.abs() < 1e-12);
    }

    #[test]
    fn min_rect_recovers_rotated_rectangle() {
        let truth = RotatedBox::new(3.0, -2.0, 2.0, 1.0, 30f64.to_radians()).unwrap();
        let fit = min_area_rect(&truth.corners()).unwrap().rect;
        assert!((fit.cx - truth.cx).abs() < 1e-9);
        assert!((fit.cy - truth.cy).abs() < 1e-9);
        assert!((fit.w - truth.w).abs() < 1e-9);
        assert!((fit.h - truth.h).abs() < 1e-9);
        assert!(angle_diff(fit.theta, truth.theta, PI).abs() < 1e-9);
    }

    #[test]
    fn min_rect_degenerate_is_flagged() {
        let fit = min_area_rect(&pts(&[(0., 0.), (1., 1.), (2., 2.)])).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.rect.h, 0.0);
        assert!((fit.rect.w - 8f64.sqrt()).abs() < 1e-12);
        assert!(min_area_rect(&[]).is_err());
    }

    #[test]
    fn point_set_validation() {
        assert!(PointSet::from_xy(&[(0., 0.), (1., 0.)]).is_err());
        assert!(PointSet::from_xy(&[(0., 0.), (1., 0.), (f64::INFINITY, 0.)]).is_err());
    }

    #[test]
    fn wrap_is_half_open() {
        assert_eq!(wrap_half_open(PI / 2.0, PI), -PI / 2.0);
        assert_eq!(wrap_half_open(-PI / 2.0, PI), -PI / 2.0);
        assert!((wrap_half_open(3.0 * PI, PI) - 0.0).abs() < 1e-12);
    }
}
