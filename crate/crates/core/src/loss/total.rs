use super::{
    center_l1_grad, center_l1_loss, focal_loss_grad, giou_loss_grad, LossWeights, Prediction,
    Target,
};
use crate::error::LossError;
use crate::geom::Point2;
use crate::matching::Assignment;

/// Per-term losses, each already divided by `max(n_pos, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub cls: f64,
    pub l1: f64,
    pub iou: f64,
    /// `lambda_cls * cls + lambda_l1 * l1 + lambda_iou * iou`.
    pub total: f64,
    pub n_pos: usize,
}

/// Gradients of [`LossBreakdown::total`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossGrad {
    pub logits: Vec<Vec<f64>>,
    pub points: Vec<Vec<Point2>>,
    /// Some GIoU term was evaluated on a kink.
    pub at_boundary: bool,
}

/// Set-prediction loss for one image.
///
/// The classification term covers every query with its (possibly
/// re-assigned) label. Regression terms cover the originally matched pairs,
/// so re-assignment only changes classification. All terms are normalized
/// by the number of matched queries, floored at one.
pub fn total_loss(
    preds: &[Prediction],
    assignment: &Assignment,
    targets: &[Target],
    w: &LossWeights,
    diag: f64,
) -> Result<LossBreakdown, LossError> {
    total_loss_with_grad(preds, assignment, targets, w, diag).map(|(b, _)| b)
}

pub fn total_loss_with_grad(
    preds: &[Prediction],
    assignment: &Assignment,
    targets: &[Target],
    w: &LossWeights,
    diag: f64,
) -> Result<(LossBreakdown, LossGrad), LossError> {
    assignment.validate(preds.len(), targets.len())?;
    let n_pos = assignment.n_pos();
    let norm = n_pos.max(1) as f64;

    let mut grad = LossGrad {
        logits: Vec::with_capacity(preds.len()),
        points: preds
            .iter()
            .map(|p| vec![Point2::default(); p.points.len()])
            .collect(),
        at_boundary: false,
    };

    let mut cls_sum = 0.0;
    for (p, label) in preds.iter().zip(&assignment.labels) {
        let (l, g) = focal_loss_grad(&p.logits, *label, w.focal_alpha, w.focal_gamma)?;
        cls_sum += l;
        grad.logits.push(g.into_iter().map(|v| v * w.lambda_cls / norm).collect());
    }

    let (mut l1_sum, mut iou_sum) = (0.0, 0.0);
    for &(q, t) in &assignment.matched {
        let pts = preds[q].points.points();
        let corners = targets[t].rect.corners();
        l1_sum += center_l1_loss(pts, &corners, diag);
        let gi = giou_loss_grad(pts, &corners);
        iou_sum += gi.terms.loss;
        grad.at_boundary |= gi.at_boundary;
        let gl = center_l1_grad(pts, &corners, diag);
        for ((acc, a), b) in grad.points[q].iter_mut().zip(gl).zip(gi.grad) {
            *acc = *acc + a * (w.lambda_l1 / norm) + b * (w.lambda_iou / norm);
        }
    }

    let (cls, l1, iou) = (cls_sum / norm, l1_sum / norm, iou_sum / norm);
    let breakdown = LossBreakdown {
        cls,
        l1,
        iou,
        total: w.lambda_cls * cls + w.lambda_l1 * l1 + w.lambda_iou * iou,
        n_pos,
    };
    Ok((breakdown, grad))
}
