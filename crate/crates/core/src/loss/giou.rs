//! Convex-hull GIoU loss and its gradient w.r.t. the predicted points.
//!
//! `loss = 1 - I/U + (R - U)/R` where `I` is the hull intersection area,
//! `U = A + B - I` and `R` the area of the hull enclosing both inputs.
//!
//! The gradient tracks where every vertex of each polygon comes from: a
//! predicted point, a target vertex, or the crossing of a predicted hull
//! edge with a target hull edge. Shoelace derivatives are then pulled back
//! through those sources. Points strictly inside the predicted hull never
//! appear as a source and get exactly zero gradient.

use crate::geom::{
    clip_labeled, convex_hull, hull_indices, shoelace, EdgeLine, PairAreas, Point2, EPS,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GiouTerms {
    pub loss: f64,
    pub iou: f64,
    pub intersection: f64,
    pub union: f64,
    pub enclosing: f64,
    /// Both hulls degenerate; `loss` is then 2 by convention.
    pub degenerate: bool,
}

impl GiouTerms {
    fn from_areas(a: f64, b: f64, i: f64, r: f64, both_degenerate: bool) -> Self {
        let union = a + b - i;
        let iou = if union > 0.0 { (i / union).clamp(0.0, 1.0) } else { 0.0 };
        let enclosing = r.max(union);
        let loss = if both_degenerate || enclosing <= 0.0 {
            2.0
        } else {
            (1.0 - iou + (enclosing - union) / enclosing).clamp(0.0, 2.0)
        };
        Self {
            loss,
            iou,
            intersection: i,
            union,
            enclosing,
            degenerate: both_degenerate,
        }
    }
}

/// Convex-hull GIoU loss between two point sets (hulled first).
pub fn giou_loss(pred: &[Point2], target: &[Point2]) -> GiouTerms {
    let (hp, ht) = (convex_hull(pred), convex_hull(target));
    let areas = PairAreas::of(&hp, &ht);
    GiouTerms::from_areas(
        areas.area_a,
        areas.area_b,
        areas.intersection,
        areas.enclosing,
        hp.is_degenerate() && ht.is_degenerate(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct GiouGrad {
    pub terms: GiouTerms,
    /// d loss / d (x, y) for every predicted point, in input order.
    pub grad: Vec<Point2>,
    /// The configuration sits on a kink (a point on a hull edge, a vertex
    /// on the other polygon's boundary, or a collapsed hull); `grad` is then
    /// the one-sided derivative that counts boundary points as vertices.
    pub at_boundary: bool,
}

/// A point that moves with the prediction, or a fixed one.
#[derive(Clone, Copy)]
enum Src {
    Pred(usize),
    Fixed(Point2),
}

fn shoelace_grad(v: &[Point2]) -> Vec<Point2> {
    let n = v.len();
    (0..n)
        .map(|i| {
            let (prev, next) = (v[(i + n - 1) % n], v[(i + 1) % n]);
            Point2::new(0.5 * (next.y - prev.y), 0.5 * (prev.x - next.x))
        })
        .collect()
}

/// Backward pass of the intersection point of lines `a-b` and `c-d` given
/// the upstream gradient `g` on that point. Returns gradients on a, b, c, d,
/// or `None` when the lines are (nearly) parallel.
fn line_cross_backward(a: Point2, b: Point2, c: Point2, d: Point2, g: Point2) -> Option<[Point2; 4]> {
    let r = b - a;
    let s = d - c;
    let den = r.cross(s);
    if den.abs() <= EPS * EPS {
        return None;
    }
    let t = (c - a).cross(s) / den;
    let gr = g.dot(r);
    let ns = Point2::new(-s.y, s.x);
    let dt_da = ns * ((1.0 - t) / den);
    let dt_db = ns * (t / den);
    let da = d - a;
    let dn_dc = Point2::new(da.y, -da.x);
    let dd_dc = Point2::new(r.y, -r.x);
    let dt_dc = (dn_dc - dd_dc * t) * (1.0 / den);
    let ac = a - c;
    let dn_dd = Point2::new(ac.y, -ac.x);
    let dd_dd = Point2::new(-r.y, r.x);
    let dt_dd = (dn_dd - dd_dd * t) * (1.0 / den);
    Some([
        g * (1.0 - t) + dt_da * gr,
        g * t + dt_db * gr,
        dt_dc * gr,
        dt_dd * gr,
    ])
}

fn point_of(src: Src, pred: &[Point2]) -> Point2 {
    match src {
        Src::Pred(i) => pred[i],
        Src::Fixed(p) => p,
    }
}

fn accumulate(grad: &mut [Point2], src: Src, g: Point2) {
    if let Src::Pred(i) = src {
        grad[i] = grad[i] + g;
    }
}

/// Loss value and gradient w.r.t. every predicted coordinate; the target
/// is held fixed.
pub fn giou_loss_grad(pred: &[Point2], target: &[Point2]) -> GiouGrad {
    let n = pred.len();
    let mut grad = vec![Point2::default(); n];
    let mut at_boundary = false;

    // Predicted hull, keeping boundary points as vertices.
    let hp = hull_indices(pred, true);
    let pv: Vec<Point2> = hp.iter().map(|&i| pred[i]).collect();
    let area_p_raw = shoelace(&pv);
    let pred_ok = pv.len() >= 3 && area_p_raw > EPS;
    let area_p = if pred_ok { area_p_raw } else { 0.0 };
    if pv.len() > convex_hull(pred).vertices().len() || !pred_ok {
        at_boundary = true;
    }

    let th = convex_hull(target);
    let tv = th.vertices().to_vec();
    let target_ok = !th.is_degenerate();
    let area_t = th.area();

    // Intersection, with edge provenance.
    let (inter, inter_poly) = if pred_ok && target_ok {
        let lp = clip_labeled(&pv, &tv);
        if lp.min_margin <= EPS {
            at_boundary = true;
        }
        let a = shoelace(&lp.verts);
        if lp.verts.len() >= 3 && a > EPS {
            (a, Some(lp))
        } else {
            (0.0, None)
        }
    } else {
        (0.0, None)
    };
    let inter = inter.min(area_p).min(area_t);

    // Enclosing hull over both point sets; indices < n are predicted points.
    let mut all = pred.to_vec();
    all.extend_from_slice(&tv);
    let hr = hull_indices(&all, true);
    let rv: Vec<Point2> = hr.iter().map(|&i| all[i]).collect();
    let area_r = shoelace(&rv).max(0.0);

    let terms = GiouTerms::from_areas(area_p, area_t, inter, area_r, !pred_ok && !target_ok);
    let union = terms.union;
    if terms.enclosing <= 0.0 || terms.degenerate {
        return GiouGrad {
            terms,
            grad,
            at_boundary: true,
        };
    }
    let r = terms.enclosing;

    // loss = 2 - I/U - U/R
    let u2 = union * union;
    let (dl_di, dl_da, dl_dr) = if union > 0.0 {
        (-(union + inter) / u2 + 1.0 / r, inter / u2 - 1.0 / r, union / (r * r))
    } else {
        (1.0 / r, -1.0 / r, 0.0)
    };

    if pred_ok {
        for (k, g) in shoelace_grad(&pv).into_iter().enumerate() {
            grad[hp[k]] = grad[hp[k]] + g * dl_da;
        }
    }

    for (k, g) in shoelace_grad(&rv).into_iter().enumerate() {
        if hr[k] < n {
            grad[hr[k]] = grad[hr[k]] + g * dl_dr;
        }
    }

    if let Some(lp) = inter_poly {
        let h = hp.len();
        let m = tv.len();
        let line_ends = |line: EdgeLine| -> (Src, Src) {
            match line {
                EdgeLine::Subject(a) => (Src::Pred(hp[a]), Src::Pred(hp[(a + 1) % h])),
                EdgeLine::Clip(c) => (Src::Fixed(tv[c]), Src::Fixed(tv[(c + 1) % m])),
            }
        };
        let nv = lp.verts.len();
        for (k, g) in shoelace_grad(&lp.verts).into_iter().enumerate() {
            let g = g * dl_di;
            let incoming = lp.lines[(k + nv - 1) % nv];
            let outgoing = lp.lines[k];
            match (incoming, outgoing) {
                (EdgeLine::Clip(_), EdgeLine::Clip(_)) => {}
                (EdgeLine::Subject(a), EdgeLine::Subject(b)) if b == (a + 1) % h => {
                    grad[hp[b]] = grad[hp[b]] + g;
                }
                (l1, l2) if l1 == l2 => at_boundary = true,
                (l1, l2) => {
                    let (a, b) = line_ends(l1);
                    let (c, d) = line_ends(l2);
                    let pts = [a, b, c, d].map(|s| point_of(s, pred));
                    match line_cross_backward(pts[0], pts[1], pts[2], pts[3], g) {
                        Some(gs) => {
                            for (s, gi) in [a, b, c, d].into_iter().zip(gs) {
                                accumulate(&mut grad, s, gi);
                            }
                        }
                        None => at_boundary = true,
                    }
                }
            }
        }
    }

    GiouGrad {
        terms,
        grad,
        at_boundary,
    }
}
