//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use odet_core::geom::Point2;
use odet_core::rng::Rng;

pub const TOL: f64 = 1e-9;

fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// `p` inside or on the closed triangle `abc` (any orientation).
fn in_triangle(p: Point2, a: Point2, b: Point2, c: Point2) -> bool {
    let d1 = cross(a, b, p);
    let d2 = cross(b, c, p);
    let d3 = cross(c, a, p);
    let neg = d1 < -TOL || d2 < -TOL || d3 < -TOL;
    let pos = d1 > TOL || d2 > TOL || d3 > TOL;
    !(neg && pos)
}

/// `p` on the closed segment `ab`.
fn on_segment(p: Point2, a: Point2, b: Point2) -> bool {
    cross(a, b, p).abs() <= TOL
        && p.x >= a.x.min(b.x) - TOL
        && p.x <= a.x.max(b.x) + TOL
        && p.y >= a.y.min(b.y) - TOL
        && p.y <= a.y.max(b.y) + TOL
}

/// Hull vertices by exhaustion: a distinct point is a vertex unless it lies
/// in a closed triangle of three other points or on a segment between two
/// others. Returned sorted by (x, y).
pub fn brute_hull(points: &[Point2]) -> Vec<Point2> {
    let mut pts: Vec<Point2> = Vec::new();
    for &p in points {
        if !pts.iter().any(|q| q.x == p.x && q.y == p.y) {
            pts.push(p);
        }
    }
    let n = pts.len();
    let mut out = Vec::new();
    'outer: for i in 0..n {
        let p = pts[i];
        for a in 0..n {
            if a == i {
                continue;
            }
            for b in a + 1..n {
                if b == i {
                    continue;
                }
                if on_segment(p, pts[a], pts[b]) {
                    continue 'outer;
                }
                for c in b + 1..n {
                    if c == i {
                        continue;
                    }
                    // Skip flat triangles; their cover is the segment test.
                    if cross(pts[a], pts[b], pts[c]).abs() <= TOL {
                        continue;
                    }
                    if in_triangle(p, pts[a], pts[b], pts[c]) {
                        continue 'outer;
                    }
                }
            }
        }
        out.push(p);
    }
    sort_points(&mut out);
    out
}

pub fn sort_points(v: &mut [Point2]) {
    v.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
}

/// Horizontal extent at height `y` of the convex hull of `pts`, computed
/// from every pairwise segment crossing the line (no hull needed).
pub fn hull_slice(pts: &[Point2], y: f64) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..pts.len() {
        let a = pts[i];
        if a.y == y {
            lo = lo.min(a.x);
            hi = hi.max(a.x);
        }
        for b in &pts[i + 1..] {
            if (a.y - y) * (b.y - y) < 0.0 {
                let t = (y - a.y) / (b.y - a.y);
                let x = a.x + t * (b.x - a.x);
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
    }
    (lo <= hi).then_some((lo, hi))
}

/// Monte-Carlo area estimates for two point sets' hulls.
#[derive(Debug, Clone, Copy)]
pub struct McAreas {
    pub a: f64,
    pub b: f64,
    pub inter: f64,
    pub union: f64,
    pub enclosing: f64,
    /// Sampling box area and sample count, for error bars.
    pub box_area: f64,
    pub samples: usize,
}

impl McAreas {
    /// Binomial standard error of an area estimate `est`.
    pub fn sigma(&self, est: f64) -> f64 {
        let p = (est / self.box_area).clamp(0.0, 1.0);
        self.box_area * (p * (1.0 - p) / self.samples as f64).sqrt()
    }
}

/// Jittered-grid sampling of the common bounding box with about `samples`
/// points. Membership of each sample comes from [`hull_slice`], which is
/// exact for convex hulls, so the only error is sampling error.
pub fn mc_areas(a: &[Point2], b: &[Point2], samples: usize, rng: &mut Rng) -> McAreas {
    let all: Vec<Point2> = a.iter().chain(b).copied().collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in &all {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let side = (samples as f64).sqrt().ceil() as usize;
    let (dx, dy) = ((x1 - x0) / side as f64, (y1 - y0) / side as f64);
    let mut counts = [0usize; 5];
    for r in 0..side {
        let y = y0 + (r as f64 + rng.uniform()) * dy;
        let sa = hull_slice(a, y);
        let sb = hull_slice(b, y);
        let sr = hull_slice(&all, y);
        for c in 0..side {
            let x = x0 + (c as f64 + rng.uniform()) * dx;
            let ia = sa.is_some_and(|(l, h)| x >= l && x <= h);
            let ib = sb.is_some_and(|(l, h)| x >= l && x <= h);
            let ir = sr.is_some_and(|(l, h)| x >= l && x <= h);
            counts[0] += usize::from(ia);
            counts[1] += usize::from(ib);
            counts[2] += usize::from(ia && ib);
            counts[3] += usize::from(ia || ib);
            counts[4] += usize::from(ir);
        }
    }
    let n = side * side;
    let box_area = (x1 - x0) * (y1 - y0);
    let f = |k: usize| box_area * counts[k] as f64 / n as f64;
    McAreas {
        a: f(0),
        b: f(1),
        inter: f(2),
        union: f(3),
        enclosing: f(4),
        box_area,
        samples: n,
    }
}

/// Smallest axis-aligned bounding-box area of `pts` rotated by each of
/// `0, step, 2 step, ...` below 90 degrees.
pub fn sweep_min_rect_area(pts: &[Point2], step_deg: f64) -> f64 {
    let n = (90.0 / step_deg).round() as usize;
    let mut best = f64::INFINITY;
    for k in 0..n {
        let t = (k as f64 * step_deg).to_radians();
        let (c, s) = (t.cos(), t.sin());
        let (mut u0, mut u1, mut v0, mut v1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in pts {
            let u = p.x * c + p.y * s;
            let v = -p.x * s + p.y * c;
            u0 = u0.min(u);
            u1 = u1.max(u);
            v0 = v0.min(v);
            v1 = v1.max(v);
        }
        best = best.min((u1 - u0) * (v1 - v0));
    }
    best
}

pub fn random_points(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<Point2> {
    (0..n).map(|_| Point2::new(rng.range(lo, hi), rng.range(lo, hi))).collect()
}

/// Points on a small integer lattice, so collinear and repeated points are
/// common.
pub fn lattice_points(rng: &mut Rng, n: usize, side: usize) -> Vec<Point2> {
    (0..n)
        .map(|_| Point2::new(rng.index(side) as f64, rng.index(side) as f64))
        .collect()
}

/// `k` points scattered around a random rotated rectangle centered near
/// `(cx, cy)`.
pub fn cluster(rng: &mut Rng, k: usize, cx: f64, cy: f64, scale: f64) -> Vec<Point2> {
    let w = rng.range(0.4, 1.0) * scale;
    let h = rng.range(0.2, 0.6) * scale;
    let t = rng.range(-3.2, 3.2);
    (0..k)
        .map(|_| {
            let p = Point2::new(rng.range(-0.5, 0.5) * w, rng.range(-0.5, 0.5) * h).rotate(t);
            Point2::new(cx + p.x, cy + p.y)
        })
        .collect()
}

/// Exhaustive assignment cost: best total over all injective maps of the
/// smaller side into the larger.
pub fn brute_assignment_cost(rows: usize, cols: usize, cost: &[f64]) -> f64 {
    fn rec(r: usize, rows: usize, cols: usize, cost: &[f64], used: &mut [bool], acc: f64, best: &mut f64, skips: usize) {
        if r == rows {
            *best = best.min(acc);
            return;
        }
        // A row may stay unassigned only when rows outnumber columns.
        if skips > 0 {
            rec(r + 1, rows, cols, cost, used, acc, best, skips - 1);
        }
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                rec(r + 1, rows, cols, cost, used, acc + cost[r * cols + c], best, skips);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    let skips = rows.saturating_sub(cols);
    rec(0, rows, cols, cost, &mut vec![false; cols], 0.0, &mut best, skips);
    best
}
