//! Training-loss terms: sigmoid focal classification, center-point L1 and
//! convex-hull GIoU, with gradients w.r.t. logits and point coordinates.

mod focal;
mod giou;
mod total;


pub use focal::{focal_loss, focal_loss_grad};
pub use giou::{giou_loss, giou_loss_grad, GiouGrad, GiouTerms};
pub use total::{total_loss, total_loss_with_grad, LossBreakdown, LossGrad};


use serde::{Deserialize, Serialize};

use crate::error::LossError;
use crate::geom::{mean, Point2, PointSet, RotatedBox};

/// Per-class logits of one query. Probabilities are per-class sigmoids;
/// background is "every class low".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassLogits(pub Vec<f64>);

impl ClassLogits {
    pub fn new(scores: Vec<f64>) -> Result<Self, LossError> {
        if scores.is_empty() {
            return Err(LossError::LengthMismatch {
                what: "class count",
                left: 0,
                right: 1,
            });
        }
        if !scores.iter().all(|s| s.is_finite()) {
            return Err(LossError::NonFinite("logits"));
        }
        Ok(Self(scores))
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.0.iter().map(|&x| sigmoid(x)).collect()
    }

    /// Highest per-class probability and its class.
    pub fn top(&self) -> (usize, f64) {
        let (c, &x) = self
            .0
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("at least one class");
        (c, sigmoid(x))
    }
}

/// Loss-term balance and focal-loss shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_iou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 2.0,
            lambda_l1: 5.0,
            lambda_iou: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let all = [
            self.lambda_cls,
            self.lambda_l1,
            self.lambda_iou,
            self.focal_alpha,
            self.focal_gamma,
        ];
        if !all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(LossError::NonFinite("loss weights must be finite and >= 0"));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return Err(LossError::NonFinite("focal alpha must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// One query's prediction: class logits and representative points.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: ClassLogits,
    pub points: PointSet,
}

/// One ground-truth object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub class: usize,
    pub rect: RotatedBox,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// L1 distance between the means of two point sets, divided by `diag`
/// (the image diagonal, or 1 for raw pixels).
pub fn center_l1_loss(pred: &[Point2], target: &[Point2], diag: f64) -> f64 {
    let d = mean(pred) - mean(target);
    (d.x.abs() + d.y.abs()) / diag
}

/// Gradient of [`center_l1_loss`] w.r.t. every predicted point. Zero
/// differences take the zero subgradient.
pub fn center_l1_grad(pred: &[Point2], target: &[Point2], diag: f64) -> Vec<Point2> {
    let d = mean(pred) - mean(target);
    let k = pred.len() as f64;
    let g = Point2::new(sign(d.x), sign(d.y)) * (1.0 / (k * diag));
    vec![g; pred.len()]
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
