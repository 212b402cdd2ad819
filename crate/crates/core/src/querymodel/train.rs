//! Desk-scale training on synthetic scenes.

use serde::{Deserialize, Serialize};

use super::memory::{raster_memory, SceneMemory};
use super::model::{predictions_from, Decoder, DecoderConfig, Frozen};
use super::schedule::QuerySchedule;
use super::tape::{Matrix, ParamStore};
use crate::error::ModelError;
use crate::eval::{mean_ap, Detection, GroundTruth, MapReport};
use crate::geom::min_area_rect;
use crate::loss::{total_loss_with_grad, LossBreakdown, LossWeights, Target};
use crate::matching::{
    hungarian, matched_ious, matching_cost, reassign_labels, Assignment, MatchConfig, ReassignScope,
};
use crate::rng::Rng;
use crate::synth::Scene;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: DecoderConfig,
    pub schedule: QuerySchedule,
    /// Weights of the training loss.
    pub loss: LossWeights,
    /// Matching cost weights, IoU gate and where the gate applies.
    pub matching: MatchConfig,
    pub steps: usize,
    /// Scenes per step.
    pub batch: usize,
    pub lr: f64,
    /// Linear warm-up length in steps, followed by cosine decay.
    pub warmup: usize,
    /// Learning rate at the last step as a fraction of `lr`.
    pub final_lr_frac: f64,
    /// Decoupled weight decay, applied to weight matrices only.
    pub weight_decay: f64,
    /// Global gradient-norm clip; zero disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Random flips and quarter turns of every training scene.
    pub augment: bool,
    /// Finite-difference spot check every this many steps (and at step 0);
    /// zero disables the checks.
    pub grad_check_every: usize,
    pub grad_check_params: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: DecoderConfig::default(),
            schedule: QuerySchedule {
                n_first: 60,
                n_last: 20,
                rho: 0.6,
                layers: 4,
            },
            loss: LossWeights::default(),
            matching: MatchConfig::default(),
            steps: 10_000,
            batch: 4,
            lr: 1e-3,
            warmup: 200,
            final_lr_frac: 0.05,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            seed: 0,
            augment: true,
            grad_check_every: 1000,
            grad_check_params: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.model.validate()?;
        self.model.check_schedule(&self.schedule)?;
        self.loss.validate()?;
        self.matching.weights.validate()?;
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be a non-negative number");
        }
        if !(0.0..=1.0).contains(&self.final_lr_frac) {
            return bad("final_lr_frac must lie in [0, 1]");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return bad("grad_clip must be non-negative");
        }
        if !self.matching.tau.is_finite() {
            return bad("tau must be finite");
        }
        Ok(())
    }

    /// Learning rate used at `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let t = ((step - self.warmup) as f64 / span).min(1.0);
        let lo = self.lr * self.final_lr_frac;
        lo + 0.5 * (self.lr - lo) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// A scene turned into model input and targets.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub memory: SceneMemory,
    pub targets: Vec<Target>,
    pub diag: f64,
}

impl PreparedScene {
    pub fn new(scene: &Scene, cfg: &DecoderConfig) -> Self {
        Self {
            memory: raster_memory(scene, cfg.grid(), cfg.classes),
            targets: scene.targets(),
            diag: scene.diag(),
        }
    }
}

/// Data-dependent choices of one pass, which a gradient check holds fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct Decisions {
    pub keep: Vec<Vec<usize>>,
    /// Reference values entering each layer; the model treats them as
    /// constants apart from the first layer's learned anchors.
    pub refs: Vec<Vec<[f64; 2]>>,
    pub assignments: Vec<Assignment>,
}

/// Loss and optional gradients of one scene.
#[derive(Debug, Clone)]
pub struct ScenePass {
    /// Sum over layers of the per-layer totals.
    pub loss: f64,
    pub layers: Vec<LossBreakdown>,
    /// Hull IoU of every matched pair, per layer.
    pub matched_ious: Vec<Vec<f64>>,
    pub decisions: Decisions,
    pub grads: Option<Vec<Matrix>>,
}

fn gated(scope: ReassignScope, layer: usize, layers: usize) -> bool {
    match scope {
        ReassignScope::PerLayer => true,
        ReassignScope::LastLayer => layer + 1 == layers,
        ReassignScope::Off => false,
    }
}

/// Deep-supervised loss of one scene: every layer is matched on its own,
/// re-assigned per the matching config, and contributes its full loss.
pub fn scene_pass(
    model: &Decoder,
    store: &ParamStore,
    scene: &PreparedScene,
    cfg: &TrainConfig,
    frozen: Option<&Decisions>,
    want_grad: bool,
) -> Result<ScenePass, ModelError> {
    let run = model.run(
        store,
        &scene.memory,
        &cfg.schedule,
        frozen.map(|d| Frozen {
            keep: &d.keep,
            refs: &d.refs,
        }),
        false,
    )?;
    let layers = run.layers.len();
    let mut out = ScenePass {
        loss: 0.0,
        layers: Vec::with_capacity(layers),
        matched_ious: Vec::with_capacity(layers),
        decisions: Decisions {
            keep: run.layers.iter().map(|l| l.keep.clone()).collect(),
            refs: run.layers.iter().map(|l| l.refs.clone()).collect(),
            assignments: Vec::with_capacity(layers),
        },
        grads: None,
    };
    let mut seeds = Vec::new();
    for (i, lv) in run.layers.iter().enumerate() {
        let logits = run.tape.value(lv.logits);
        let points = run.tape.value(lv.points);
        if !logits.is_finite() || !points.is_finite() {
            return Err(ModelError::Diverged {
                step: 0,
                detail: format!("layer {i} produced non-finite outputs"),
            });
        }
        let preds = predictions_from(logits, points)?;
        let assignment = match frozen {
            Some(d) => d.assignments[i].clone(),
            None => {
                let pairs = if scene.targets.is_empty() {
                    Vec::new()
                } else {
                    let cost = matching_cost(&preds, &scene.targets, &cfg.matching.weights, scene.diag)?;
                    hungarian(&cost)
                };
                if gated(cfg.matching.scope, i, layers) {
                    let pts: Vec<_> = preds.iter().map(|p| p.points.clone()).collect();
                    reassign_labels(&pts, &pairs, &scene.targets, cfg.matching.tau)
                } else {
                    Assignment::plain(preds.len(), pairs, &scene.targets)
                }
            }
        };
        let pts: Vec<_> = preds.iter().map(|p| p.points.clone()).collect();
        out.matched_ious
            .push(matched_ious(&pts, &assignment.matched, &scene.targets));
        let (b, g) = total_loss_with_grad(&preds, &assignment, &scene.targets, &cfg.loss, scene.diag)?;
        out.loss += b.total;
        out.layers.push(b);
        out.decisions.assignments.push(assignment);
        if want_grad {
            let gl = Matrix::from_vec(logits.rows, logits.cols, g.logits.into_iter().flatten().collect());
            let gp = Matrix::from_vec(
                points.rows,
                points.cols,
                g.points.into_iter().flatten().flat_map(|p| [p.x, p.y]).collect(),
            );
            seeds.push((lv.logits, gl));
            seeds.push((lv.points, gp));
        }
    }
    if want_grad {
        out.grads = Some(run.tape.backward(seeds));
    }
    Ok(out)
}

/// Result of one finite-difference spot check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub checked: usize,
    /// Draws rejected because the loss has a kink at that coordinate.
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    /// Parameter name and element of the worst coordinate.
    pub worst: String,
}

/// Relative error threshold of the spot checks.
pub const GRAD_CHECK_TOL: f64 = 1e-3;
const FD_STEP: f64 = 1e-6;
/// Gradients smaller than this are compared in absolute terms; central
/// differences of a loss near 10 carry roundoff of a few 1e-9.
const GRAD_FLOOR: f64 = 1e-5;

/// Compares analytic gradients of one scene against central differences
/// at `count` random coordinates, with top-k choices and assignments held
/// fixed. Coordinates where the one-sided slopes disagree (a ReLU, hull or
/// absolute-value kink within one step) are redrawn.
pub fn gradient_check(
    model: &Decoder,
    scene: &PreparedScene,
    cfg: &TrainConfig,
    count: usize,
    rng: &mut Rng,
) -> Result<GradCheck, ModelError> {
    let base = scene_pass(model, model.params(), scene, cfg, None, true)?;
    let grads = base.grads.as_ref().expect("gradients requested");
    let frozen = &base.decisions;
    let f0 = scene_pass(model, model.params(), scene, cfg, Some(frozen), false)?.loss;
    let total = model.params().scalar_count();
    let mut report = GradCheck {
        checked: 0,
        skipped_kinks: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    let mut scratch = model.params().clone();
    while report.checked < count {
        if report.skipped_kinks > 20 * count.max(1) {
            break;
        }
        let (p, e) = locate(model.params(), rng.index(total));
        let orig = scratch.values[p].data[e];
        scratch.values[p].data[e] = orig + FD_STEP;
        let fp = scene_pass(model, &scratch, scene, cfg, Some(frozen), false)?.loss;
        scratch.values[p].data[e] = orig - FD_STEP;
        let fm = scene_pass(model, &scratch, scene, cfg, Some(frozen), false)?.loss;
        scratch.values[p].data[e] = orig;
        let (fwd, bwd) = ((fp - f0) / FD_STEP, (f0 - fm) / FD_STEP);
        if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()) + 1e-6 {
            report.skipped_kinks += 1;
            continue;
        }
        let num = (fp - fm) / (2.0 * FD_STEP);
        let an = grads[p].data[e];
        let err = (an - num).abs() / an.abs().max(num.abs()).max(GRAD_FLOOR);
        report.checked += 1;
        if err >= report.max_rel_err {
            report.max_rel_err = err;
            report.worst = format!("{}[{e}]: analytic {an:e}, numeric {num:e}", model.params().names[p]);
        }
    }
    Ok(report)
}

fn locate(store: &ParamStore, mut flat: usize) -> (usize, usize) {
    for (i, m) in store.values.iter().enumerate() {
        if flat < m.data.len() {
            return (i, flat);
        }
        flat -= m.data.len();
    }
    unreachable!("flat index within scalar count")
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    /// Batch mean of the deep-supervised loss.
    pub loss: f64,
    /// Batch means of the per-term losses, summed over layers.
    pub cls: f64,
    pub l1: f64,
    pub iou: f64,
    pub n_pos: usize,
    pub queries: Vec<usize>,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_check: Option<GradCheck>,
}

pub struct TrainOutcome {
    pub model: Decoder,
    pub log: Vec<StepRecord>,
}

struct AdamW {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    decay: Vec<bool>,
    t: i32,
}

impl AdamW {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(store: &ParamStore) -> Self {
        Self {
            m: store.zeros_like(),
            v: store.zeros_like(),
            decay: store.names.iter().map(|n| n.ends_with(".w")).collect(),
            t: 0,
        }
    }

    fn step(&mut self, store: &mut ParamStore, grads: &[Matrix], lr: f64, wd: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i].data, &mut self.v[i].data);
            let decay = if self.decay[i] { lr * wd } else { 0.0 };
            for (k, p) in store.values[i].data.iter_mut().enumerate() {
                m[k] = Self::B1 * m[k] + (1.0 - Self::B1) * g.data[k];
                v[k] = Self::B2 * v[k] + (1.0 - Self::B2) * g.data[k] * g.data[k];
                let step = lr * (m[k] / c1) / ((v[k] / c2).sqrt() + Self::EPS);
                *p -= step + decay * *p;
            }
        }
    }
}

/// Trains a fresh decoder (initialized from `cfg.seed`) on `scenes`.
/// `on_step` sees every log record as it is produced.
pub fn train_toy(
    scenes: &[Scene],
    cfg: &TrainConfig,
    on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome, ModelError> {
    let model = Decoder::new(cfg.model.clone(), cfg.seed)?;
    train_from(model, scenes, cfg, on_step)
}

/// Continues training `model` with the settings in `cfg`.
pub fn train_from(
    mut model: Decoder,
    scenes: &[Scene],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    if model.config() != &cfg.model {
        return Err(ModelError::Config("model config differs from training config".into()));
    }
    if scenes.is_empty() && cfg.steps > 0 {
        return Err(ModelError::Config("no training scenes".into()));
    }
    let variants = if cfg.augment { 8 } else { 1 };
    let data: Vec<Vec<PreparedScene>> = scenes
        .iter()
        .map(|s| {
            (0..variants)
                .map(|t| PreparedScene::new(&s.dihedral(t), &cfg.model))
                .collect()
        })
        .collect();
    let mut rng = Rng::new(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    // Spot checks draw from their own stream so they leave the batch order alone.
    let mut check_rng = Rng::new(cfg.seed ^ 0x3c6e_f372_fe94_f82b);
    let mut opt = AdamW::new(model.params());
    let queries = cfg.schedule.counts();
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut grads = model.params().zeros_like();
        let mut rec = StepRecord {
            step,
            lr: cfg.lr_at(step),
            loss: 0.0,
            cls: 0.0,
            l1: 0.0,
            iou: 0.0,
            n_pos: 0,
            queries: queries.clone(),
            grad_norm: 0.0,
            grad_check: None,
        };
        let check_now = cfg.grad_check_every > 0 && step % cfg.grad_check_every == 0;
        for b in 0..cfg.batch {
            let item = &data[rng.index(data.len())][rng.index(variants)];
            if check_now && b == 0 {
                let report = gradient_check(&model, item, cfg, cfg.grad_check_params, &mut check_rng)
                    .map_err(|e| at_step(e, step))?;
                if report.max_rel_err >= GRAD_CHECK_TOL || report.checked < cfg.grad_check_params {
                    return Err(ModelError::GradientCheck {
                        step,
                        detail: format!(
                            "{} of {} coordinates checked, worst {} (rel err {:e})",
                            report.checked, cfg.grad_check_params, report.worst, report.max_rel_err
                        ),
                    });
                }
                rec.grad_check = Some(report);
            }
            let pass = scene_pass(&model, model.params(), item, cfg, None, true).map_err(|e| at_step(e, step))?;
            for (acc, g) in grads.iter_mut().zip(pass.grads.as_ref().expect("gradients requested")) {
                for (a, v) in acc.data.iter_mut().zip(&g.data) {
                    *a += v;
                }
            }
            rec.loss += pass.loss;
            for l in &pass.layers {
                rec.cls += l.cls;
                rec.l1 += l.l1;
                rec.iou += l.iou;
            }
            rec.n_pos += pass.layers.last().map_or(0, |l| l.n_pos);
        }
        let inv = 1.0 / cfg.batch as f64;
        rec.loss *= inv;
        rec.cls *= inv;
        rec.l1 *= inv;
        rec.iou *= inv;
        let mut sq = 0.0;
        for g in &mut grads {
            for v in &mut g.data {
                *v *= inv;
                sq += *v * *v;
            }
        }
        rec.grad_norm = sq.sqrt();
        if !rec.loss.is_finite() || !rec.grad_norm.is_finite() {
            return Err(ModelError::Diverged {
                step,
                detail: format!("loss {} gradient norm {}", rec.loss, rec.grad_norm),
            });
        }
        if cfg.grad_clip > 0.0 && rec.grad_norm > cfg.grad_clip {
            let s = cfg.grad_clip / rec.grad_norm;
            grads.iter_mut().for_each(|g| g.data.iter_mut().for_each(|v| *v *= s));
        }
        opt.step(model.params_mut(), &grads, rec.lr, cfg.weight_decay);
        on_step(&rec);
        log.push(rec);
    }
    Ok(TrainOutcome { model, log })
}

fn at_step(e: ModelError, step: usize) -> ModelError {
    match e {
        ModelError::Diverged { detail, .. } => ModelError::Diverged { step, detail },
        ModelError::Loss(l) => ModelError::Diverged {
            step,
            detail: l.to_string(),
        },
        other => other,
    }
}

/// Rotated-box detections of the last layer: one per query and class,
/// scored by the class sigmoid. Queries whose points collapse are dropped.
pub fn detect(
    model: &Decoder,
    scene: &Scene,
    sched: &QuerySchedule,
) -> Result<Vec<Detection>, ModelError> {
    let prepared = PreparedScene::new(scene, model.config());
    let out = model.forward(&prepared.memory, sched)?;
    let last = out.layers.last().expect("at least one layer");
    let mut dets = Vec::new();
    for (q, pts) in last.point_lists().into_iter().enumerate() {
        let fit = min_area_rect(&pts).map_err(|e| ModelError::Shape(e.to_string()))?;
        if fit.degenerate || fit.rect.w <= 0.0 || fit.rect.h <= 0.0 {
            continue;
        }
        for (class, &z) in last.logits.row(q).iter().enumerate() {
            dets.push(Detection {
                scene: scene.id.clone(),
                class,
                score: crate::loss::sigmoid(z),
                rect: fit.rect,
            });
        }
    }
    Ok(dets)
}

pub fn ground_truth(scene: &Scene) -> Vec<GroundTruth> {
    scene
        .objects
        .iter()
        .map(|o| GroundTruth {
            scene: scene.id.clone(),
            class: o.class,
            rect: o.rect,
            difficult: o.difficult,
        })
        .collect()
}

/// mAP of `model` over `scenes` at the given IoU threshold.
pub fn evaluate(
    model: &Decoder,
    scenes: &[Scene],
    sched: &QuerySchedule,
    iou_thresh: f64,
) -> Result<MapReport, ModelError> {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for s in scenes {
        dets.extend(detect(model, s, sched)?);
        gts.extend(ground_truth(s));
    }
    mean_ap(&dets, &gts, iou_thresh).map_err(|e| ModelError::Shape(e.to_string()))
}

/// Matched-pair hull IoUs per layer over `scenes`, using the training
/// matching (before any re-assignment).
pub fn layer_matched_ious(
    model: &Decoder,
    scenes: &[Scene],
    cfg: &TrainConfig,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let mut per_layer = vec![Vec::new(); cfg.model.layers];
    for s in scenes {
        let prepared = PreparedScene::new(s, &cfg.model);
        let pass = scene_pass(model, model.params(), &prepared, cfg, None, false)?;
        for (acc, v) in per_layer.iter_mut().zip(pass.matched_ious) {
            acc.extend(v);
        }
    }
    Ok(per_layer)
}
