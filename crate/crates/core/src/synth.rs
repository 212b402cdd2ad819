//! Synthetic aerial-style scenes: non-overlapping rotated rectangles of a
//! few classes with distinct size and aspect-ratio ranges.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::geom::{convex_intersection, AsHull, Point2, RotatedBox};
use crate::loss::Target;
use crate::rng::Rng;

/// Category names used when writing scenes; classes past the list are
/// written as `class<N>`.
pub const CLASS_NAMES: [&str; 3] = ["small-vehicle", "ship", "storage-tank"];

pub fn class_name(class: usize) -> String {
    CLASS_NAMES
        .get(class)
        .map_or_else(|| format!("class{class}"), |s| s.to_string())
}

pub fn class_index(name: &str) -> Option<usize> {
    CLASS_NAMES
        .iter()
        .position(|n| *n == name)
        .or_else(|| name.strip_prefix("class")?.parse().ok())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: usize,
    pub rect: RotatedBox,
    pub difficult: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    /// Side length of the square image, pixels.
    pub size: f64,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    /// Every object as a training target, difficult ones included.
    pub fn targets(&self) -> Vec<Target> {
        self.objects
            .iter()
            .map(|o| Target {
                class: o.class,
                rect: o.rect,
            })
            .collect()
    }

    pub fn diag(&self) -> f64 {
        self.size * std::f64::consts::SQRT_2
    }

    /// One of the eight symmetries of the square image: `t % 4` quarter
    /// turns counter-clockwise about the image center, preceded by a mirror
    /// in x when `t >= 4`.
    pub fn dihedral(&self, t: usize) -> Scene {
        let c = 0.5 * self.size;
        let (turns, flip) = (t % 4, t >= 4);
        let objects = self
            .objects
            .iter()
            .map(|o| {
                let mut q = Point2::new(o.rect.cx - c, o.rect.cy - c);
                let mut theta = o.rect.theta;
                if flip {
                    q.x = -q.x;
                    theta = -theta;
                }
                for _ in 0..turns {
                    q = Point2::new(-q.y, q.x);
                    theta += FRAC_PI_2;
                }
                let rect = RotatedBox::new(q.x + c, q.y + c, o.rect.w, o.rect.h, theta)
                    .expect("transform keeps a valid box");
                SceneObject { rect, ..*o }
            })
            .collect();
        Scene {
            id: format!("{}-d{t}", self.id),
            size: self.size,
            objects,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub size: f64,
    pub classes: usize,
    /// Minimum clearance between objects and from the image border, pixels.
    pub gap: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenes: 200,
            min_objects: 1,
            max_objects: 8,
            size: 256.0,
            classes: 3,
            gap: 3.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.classes == 0 {
            return Err("need at least one class".into());
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(format!(
                "object range {}..={} is empty or starts at zero",
                self.min_objects, self.max_objects
            ));
        }
        if self.max_objects > 64 {
            return Err("at most 64 objects per scene".into());
        }
        if !(self.size.is_finite() && self.size >= 128.0) {
            return Err(format!("image size {} below 128", self.size));
        }
        if !(self.gap.is_finite() && self.gap >= 0.0) {
            return Err("gap must be non-negative".into());
        }
        Ok(())
    }
}

/// (long side range, aspect ratio range) in pixels at a 256-pixel image;
/// scaled with the image size.
fn class_shape(class: usize) -> ((f64, f64), (f64, f64)) {
    match class % 3 {
        0 => ((20.0, 32.0), (1.6, 2.2)),
        1 => ((44.0, 76.0), (3.2, 4.4)),
        _ => ((26.0, 44.0), (1.0, 1.25)),
    }
}

fn sample_object(rng: &mut Rng, cfg: &SynthConfig) -> SceneObject {
    let class = rng.index(cfg.classes);
    let ((l0, l1), (a0, a1)) = class_shape(class);
    let scale = cfg.size / 256.0;
    let w = rng.range(l0, l1) * scale;
    let h = w / rng.range(a0, a1);
    let theta = rng.range(-FRAC_PI_2, FRAC_PI_2);
    let (c, s) = (theta.cos().abs(), theta.sin().abs());
    let ex = 0.5 * (w * c + h * s) + cfg.gap;
    let ey = 0.5 * (w * s + h * c) + cfg.gap;
    let cx = rng.range(ex, cfg.size - ex);
    let cy = rng.range(ey, cfg.size - ey);
    SceneObject {
        class,
        rect: RotatedBox::new(cx, cy, w, h, theta).expect("sampled box is valid"),
        difficult: false,
    }
}

fn grown(r: &RotatedBox, by: f64) -> RotatedBox {
    RotatedBox {
        w: r.w + 2.0 * by,
        h: r.h + 2.0 * by,
        ..*r
    }
}

fn clear_of(candidate: &RotatedBox, placed: &[SceneObject], gap: f64) -> bool {
    let hull = grown(candidate, 0.5 * gap).to_hull();
    placed.iter().all(|o| {
        let other = grown(&o.rect, 0.5 * gap).to_hull();
        let i = convex_intersection(&hull, &other);
        i.is_degenerate() || i.area() == 0.0
    })
}

/// Generates `cfg.scenes` scenes from one random stream, scene ids
/// `scene0000`, `scene0001`, ...
pub fn generate_scenes(cfg: &SynthConfig) -> Result<Vec<Scene>, String> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let mut scenes = Vec::with_capacity(cfg.scenes);
    for i in 0..cfg.scenes {
        let span = cfg.max_objects - cfg.min_objects + 1;
        let want = cfg.min_objects + rng.index(span);
        let mut objects: Vec<SceneObject> = Vec::with_capacity(want);
        let mut attempts = 0;
        while objects.len() < want {
            attempts += 1;
            if attempts > 400 * want && objects.len() >= cfg.min_objects {
                break;
            }
            if attempts > 100_000 {
                return Err(format!("could not place {} objects in scene {i}", cfg.min_objects));
            }
            let o = sample_object(&mut rng, cfg);
            if clear_of(&o.rect, &objects, cfg.gap) {
                objects.push(o);
            }
        }
        scenes.push(Scene {
            id: format!("scene{i:04}"),
            size: cfg.size,
            objects,
        });
    }
    Ok(scenes)
}
