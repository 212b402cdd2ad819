//! Query-to-ground-truth assignment: matching cost, Hungarian solver,
//! IoU-gated label re-assignment, and the matched-IoU CDF diagnostic.

mod hungarian;

pub use hungarian::hungarian;

use serde::{Deserialize, Serialize};

use crate::error::LossError;
use crate::geom::{convex_hull_iou, AsHull, PointSet};
use crate::loss::{center_l1_loss, giou_loss, LossWeights, Prediction, Target};

/// Dense row-major cost matrix, queries by ground truths.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LossError> {
        if data.len() != rows * cols {
            return Err(LossError::LengthMismatch {
                what: "cost matrix entries",
                left: data.len(),
                right: rows * cols,
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(LossError::NonFinite("cost matrix"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Sum of the selected entries, in the given order.
    pub fn total(&self, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(i, j)| self.get(i, j)).sum()
    }
}

/// Optimal matching plus the per-query classification labels.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Assignment {
    /// (query, target) pairs from the bipartite matching.
    pub matched: Vec<(usize, usize)>,
    /// Per-query class label after re-assignment; `None` is background.
    pub labels: Vec<Option<usize>>,
}

impl Assignment {
    /// Labels straight from the matching, without any IoU gating.
    pub fn plain(queries: usize, matched: Vec<(usize, usize)>, targets: &[Target]) -> Self {
        let mut labels = vec![None; queries];
        for &(q, t) in &matched {
            labels[q] = Some(targets[t].class);
        }
        Self { matched, labels }
    }

    pub fn n_pos(&self) -> usize {
        self.matched.len()
    }

    /// Checks index ranges and one-to-one-ness.
    pub fn validate(&self, queries: usize, targets: usize) -> Result<(), LossError> {
        if self.labels.len() != queries {
            return Err(LossError::LengthMismatch {
                what: "assignment labels vs queries",
                left: self.labels.len(),
                right: queries,
            });
        }
        let mut seen_q = vec![false; queries];
        let mut seen_t = vec![false; targets];
        for &(q, t) in &self.matched {
            if q >= queries || t >= targets {
                return Err(LossError::InvalidAssignment(format!(
                    "pair ({q}, {t}) out of range for {queries} queries / {targets} targets"
                )));
            }
            if std::mem::replace(&mut seen_q[q], true) || std::mem::replace(&mut seen_t[t], true) {
                return Err(LossError::InvalidAssignment(format!("pair ({q}, {t}) repeats an index")));
            }
        }
        Ok(())
    }
}

/// When IoU-gated label re-assignment applies during deep supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReassignScope {
    /// Every decoder layer gates its own matches.
    #[default]
    PerLayer,
    /// Only the last layer's loss uses gated labels.
    LastLayer,
    /// Plain matching labels everywhere.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    /// A matched query keeps its label only when its hull IoU exceeds this.
    pub tau: f64,
    pub weights: LossWeights,
    pub scope: ReassignScope,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            weights: LossWeights::default(),
            scope: ReassignScope::PerLayer,
        }
    }
}

/// Pairwise matching cost: `-lambda_cls * p[class] + lambda_l1 * center_l1
/// + lambda_iou * giou`. `diag` normalizes the center distance.
pub fn matching_cost(
    preds: &[Prediction],
    targets: &[Target],
    w: &LossWeights,
    diag: f64,
) -> Result<CostMatrix, LossError> {
    let corners: Vec<_> = targets.iter().map(|t| t.rect.corners()).collect();
    let mut data = Vec::with_capacity(preds.len() * targets.len());
    for p in preds {
        let probs = p.logits.probs();
        for (t, c) in targets.iter().zip(&corners) {
            let prob = *probs.get(t.class).ok_or(LossError::ClassOutOfRange {
                class: t.class,
                classes: probs.len(),
            })?;
            let pts = p.points.points();
            data.push(
                -w.lambda_cls * prob
                    + w.lambda_l1 * center_l1_loss(pts, c, diag)
                    + w.lambda_iou * giou_loss(pts, c).loss,
            );
        }
    }
    CostMatrix::new(preds.len(), targets.len(), data)
}

/// Keeps a matched query's class only when its hull IoU with the matched
/// target is strictly greater than `tau`; everything else is background.
/// The matched pairs themselves are returned unchanged.
pub fn reassign_labels(
    points: &[PointSet],
    matched: &[(usize, usize)],
    targets: &[Target],
    tau: f64,
) -> Assignment {
    let mut labels = vec![None; points.len()];
    for &(q, t) in matched {
        let iou = convex_hull_iou(&points[q], &targets[t].rect);
        if iou > tau {
            labels[q] = Some(targets[t].class);
        }
    }
    Assignment {
        matched: matched.to_vec(),
        labels,
    }
}

/// Hull IoU of every matched pair, in pair order.
pub fn matched_ious(points: &[PointSet], matched: &[(usize, usize)], targets: &[Target]) -> Vec<f64> {
    matched
        .iter()
        .map(|&(q, t)| convex_hull_iou(&points[q], &targets[t].rect.to_hull()))
        .collect()
}

/// Empirical CDF of matched-pair hull IoUs as `(iou, fraction <= iou)`,
/// one row per distinct IoU value.
pub fn iou_cdf(points: &[PointSet], matched: &[(usize, usize)], targets: &[Target]) -> Vec<(f64, f64)> {
    empirical_cdf(matched_ious(points, matched, targets))
}

pub fn empirical_cdf(mut values: Vec<f64>) -> Vec<(f64, f64)> {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, v) in values.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *v => last.1 = frac,
            _ => out.push((*v, frac)),
        }
    }
    out
}

/// Reads `F(x)` off a table from [`iou_cdf`].
pub fn cdf_at(cdf: &[(f64, f64)], x: f64) -> f64 {
    cdf.iter().take_while(|(v, _)| *v <= x).last().map_or(0.0, |r| r.1)
}
