//! Rotated-box detection metrics: per-class average precision with VOC-2007
//! 11-point interpolation, and their mean.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::EvalError;
use crate::geom::{AsHull, ConvexPolygon, PairAreas, RotatedBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scene: String,
    pub class: usize,
    pub score: f64,
    pub rect: RotatedBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scene: String,
    pub class: usize,
    pub rect: RotatedBox,
    pub difficult: bool,
}

/// Outcome of one detection after matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetOutcome {
    TruePositive,
    FalsePositive,
    /// Overlaps only a difficult ground truth; left out of the curve.
    Ignored,
}

/// Precision/recall after each counted detection, in score order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrCurve {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    /// Non-difficult ground truths of the class.
    pub positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    /// `None` when the class has no non-difficult ground truth.
    pub ap: Option<f64>,
    pub positives: usize,
    pub detections: usize,
    pub true_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub per_class: Vec<ClassAp>,
    pub map: f64,
}

fn check_scores(dets: &[Detection]) -> Result<(), EvalError> {
    match dets.iter().find(|d| !(0.0..=1.0).contains(&d.score)) {
        Some(d) => Err(EvalError::BadScore(d.score)),
        None => Ok(()),
    }
}

/// Matches the detections of `class` to ground truth in descending score
/// order (equal scores keep input order). Returns the outcome of every
/// detection of the class, in that order, plus the positive count.
pub fn match_class(
    dets: &[Detection],
    gts: &[GroundTruth],
    class: usize,
    iou_thresh: f64,
) -> Result<(Vec<(usize, DetOutcome)>, usize), EvalError> {
    check_scores(dets)?;
    let mut by_scene: HashMap<&str, Vec<(ConvexPolygon, bool)>> = HashMap::new();
    let mut positives = 0;
    for g in gts.iter().filter(|g| g.class == class) {
        positives += usize::from(!g.difficult);
        by_scene
            .entry(g.scene.as_str())
            .or_default()
            .push((g.rect.to_hull(), g.difficult));
    }
    let mut used: HashMap<&str, Vec<bool>> = by_scene
        .iter()
        .map(|(k, v)| (*k, vec![false; v.len()]))
        .collect();

    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class == class).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));

    let mut out = Vec::with_capacity(order.len());
    for i in order {
        let d = &dets[i];
        let Some(cands) = by_scene.get(d.scene.as_str()) else {
            out.push((i, DetOutcome::FalsePositive));
            continue;
        };
        let taken = used.get_mut(d.scene.as_str()).expect("same keys");
        let hull = d.rect.to_hull();
        let mut best: Option<(usize, f64)> = None;
        let mut hits_difficult = false;
        for (j, (g, difficult)) in cands.iter().enumerate() {
            let iou = PairAreas::of(&hull, g).iou();
            if iou < iou_thresh {
                continue;
            }
            if *difficult {
                hits_difficult = true;
            } else if !taken[j] && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        let outcome = match best {
            Some((j, _)) => {
                taken[j] = true;
                DetOutcome::TruePositive
            }
            None if hits_difficult => DetOutcome::Ignored,
            None => DetOutcome::FalsePositive,
        };
        out.push((i, outcome));
    }
    Ok((out, positives))
}

pub fn pr_curve(
    dets: &[Detection],
    gts: &[GroundTruth],
    class: usize,
    iou_thresh: f64,
) -> Result<PrCurve, EvalError> {
    let (outcomes, positives) = match_class(dets, gts, class, iou_thresh)?;
    let mut curve = PrCurve {
        positives,
        ..PrCurve::default()
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    for (_, o) in outcomes {
        match o {
            DetOutcome::TruePositive => tp += 1,
            DetOutcome::FalsePositive => fp += 1,
            DetOutcome::Ignored => continue,
        }
        curve.recall.push(if positives == 0 { 0.0 } else { tp as f64 / positives as f64 });
        curve.precision.push(tp as f64 / (tp + fp) as f64);
    }
    Ok(curve)
}

/// Mean over recall levels 0, 0.1, ..., 1 of the best precision reached at
/// or beyond that recall.
pub fn voc07_ap(recall: &[f64], precision: &[f64]) -> f64 {
    (0..=10)
        .map(|t| {
            let level = t as f64 / 10.0;
            recall
                .iter()
                .zip(precision)
                .filter(|(r, _)| **r >= level - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// Average precision of one class; `None` when the class has no
/// non-difficult ground truth.
pub fn ap_per_class(
    dets: &[Detection],
    gts: &[GroundTruth],
    class: usize,
    iou_thresh: f64,
) -> Result<Option<f64>, EvalError> {
    let c = pr_curve(dets, gts, class, iou_thresh)?;
    Ok((c.positives > 0).then(|| voc07_ap(&c.recall, &c.precision)))
}

/// Per-class AP for every class seen in either list, and the unweighted
/// mean over classes with defined AP.
pub fn mean_ap(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> Result<MapReport, EvalError> {
    check_scores(dets)?;
    let classes: BTreeSet<usize> = dets.iter().map(|d| d.class).chain(gts.iter().map(|g| g.class)).collect();
    let mut per_class = Vec::with_capacity(classes.len());
    for class in classes {
        let (outcomes, positives) = match_class(dets, gts, class, iou_thresh)?;
        let c = pr_curve(dets, gts, class, iou_thresh)?;
        per_class.push(ClassAp {
            class,
            ap: (positives > 0).then(|| voc07_ap(&c.recall, &c.precision)),
            positives,
            detections: outcomes.len(),
            true_positives: outcomes.iter().filter(|(_, o)| *o == DetOutcome::TruePositive).count(),
        });
    }
    let defined: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    if defined.is_empty() {
        return Err(EvalError::NoDefinedClasses);
    }
    let map = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(MapReport { per_class, map })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(cx: f64, cy: f64) -> RotatedBox {
        RotatedBox::new(cx, cy, 20.0, 10.0, 0.3).unwrap()
    }

    fn det(scene: &str, class: usize, score: f64, r: RotatedBox) -> Detection {
        Detection {
            scene: scene.into(),
            class,
            score,
            rect: r,
        }
    }

    fn gt(scene: &str, class: usize, r: RotatedBox, difficult: bool) -> GroundTruth {
        GroundTruth {
            scene: scene.into(),
            class,
            rect: r,
            difficult,
        }
    }

    #[test]
    fn perfect_and_missed() {
        let g = vec![gt("a", 0, rect(50.0, 50.0), false)];
        let d = vec![det("a", 0, 0.9, rect(50.0, 50.0))];
        assert_eq!(ap_per_class(&d, &g, 0, 0.5).unwrap(), Some(1.0));
        // Shifted along the long side so IoU is 0.3 / 1.7 < 0.5.
        let shifted = RotatedBox::new(50.0 + 14.0 * 0.3f64.cos(), 50.0 + 14.0 * 0.3f64.sin(), 20.0, 10.0, 0.3).unwrap();
        let d = vec![det("a", 0, 0.9, shifted)];
        assert_eq!(ap_per_class(&d, &g, 0, 0.5).unwrap(), Some(0.0));
        assert_eq!(ap_per_class(&d, &g, 1, 0.5).unwrap(), None);
    }

    #[test]
    fn duplicates_count_once() {
        let g = vec![gt("a", 0, rect(50.0, 50.0), false)];
        let d = vec![det("a", 0, 0.9, rect(50.0, 50.0)), det("a", 0, 0.8, rect(50.5, 50.0))];
        let (o, _) = match_class(&d, &g, 0, 0.5).unwrap();
        assert_eq!(o, vec![(0, DetOutcome::TruePositive), (1, DetOutcome::FalsePositive)]);
    }

    #[test]
    fn difficult_is_neutral() {
        let g = vec![gt("a", 0, rect(50.0, 50.0), false), gt("a", 0, rect(150.0, 50.0), true)];
        let d = vec![det("a", 0, 0.95, rect(150.0, 50.0)), det("a", 0, 0.9, rect(50.0, 50.0))];
        let (o, pos) = match_class(&d, &g, 0, 0.5).unwrap();
        assert_eq!(pos, 1);
        assert_eq!(o[0].1, DetOutcome::Ignored);
        assert_eq!(ap_per_class(&d, &g, 0, 0.5).unwrap(), Some(1.0));
    }

    #[test]
    fn two_class_mean() {
        let g = vec![gt("a", 0, rect(50.0, 50.0), false), gt("a", 1, rect(150.0, 150.0), false)];
        let d = vec![det("a", 0, 0.9, rect(50.0, 50.0)), det("a", 1, 0.9, rect(60.0, 120.0))];
        let r = mean_ap(&d, &g, 0.5).unwrap();
        assert_eq!(r.map, 0.5);
        assert_eq!(mean_ap(&d, &[], 0.5), Err(EvalError::NoDefinedClasses));
        let bad = vec![det("a", 0, 1.5, rect(50.0, 50.0))];
        assert_eq!(mean_ap(&bad, &g, 0.5), Err(EvalError::BadScore(1.5)));
    }

    #[test]
    fn eleven_point_interpolation() {
        // Recall reaches 0.5 at precision 1, then 1.0 at precision 0.5.
        let ap = voc07_ap(&[0.5, 0.5, 1.0], &[1.0, 0.5, 2.0 / 3.0]);
        assert!((ap - (6.0 + 5.0 * 2.0 / 3.0) / 11.0).abs() < 1e-15);
        assert_eq!(voc07_ap(&[], &[]), 0.0);
    }
}
