//! Text formats: DOTA-style annotation files and prediction lists.
//!
//! Annotation lines are `x1 y1 x2 y2 x3 y3 x4 y4 category difficult`. The
//! `imagesource:` and `gsd:` header lines of DOTA files, blank lines and `#`
//! comments are skipped. Prediction lines are `scene class score` followed
//! either by `cx cy w h theta` or by K >= 3 point pairs `x1 y1 ... xK yK`;
//! one file uses one layout throughout. Numbers are written with the
//! shortest representation that reads back exactly.

use std::fmt::Write as _;

use crate::error::ParseError;
use crate::eval::Detection;
use crate::geom::{min_area_rect, Point2, RotatedBox};
use crate::synth::{class_index, class_name, Scene, SceneObject};

/// One annotated object, corners in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct DotaRecord {
    pub corners: [Point2; 4],
    pub category: String,
    pub difficult: bool,
}

impl DotaRecord {
    pub fn from_object(o: &SceneObject) -> Self {
        Self {
            corners: o.rect.corners(),
            category: class_name(o.class),
            difficult: o.difficult,
        }
    }

    /// Class index and minimum-area rectangle of the corners.
    pub fn to_object(&self) -> Result<SceneObject, String> {
        let class = class_index(&self.category).ok_or_else(|| format!("unknown category {:?}", self.category))?;
        let fit = min_area_rect(&self.corners).map_err(|e| e.to_string())?;
        if fit.degenerate {
            return Err("corners are collinear".into());
        }
        Ok(SceneObject {
            class,
            rect: fit.rect,
            difficult: self.difficult,
        })
    }
}

fn err(source: &str, line: usize, field: usize, message: impl Into<String>) -> ParseError {
    ParseError {
        source_name: source.into(),
        line,
        field,
        message: message.into(),
    }
}

fn number(source: &str, line: usize, field: usize, tok: &str) -> Result<f64, ParseError> {
    let v: f64 = tok
        .parse()
        .map_err(|_| err(source, line, field, format!("expected a number, found {tok:?}")))?;
    if !v.is_finite() {
        return Err(err(source, line, field, format!("{tok} is not finite")));
    }
    Ok(v)
}

fn skip(line: &str) -> bool {
    let t = line.trim();
    t.is_empty() || t.starts_with('#') || t.starts_with("imagesource:") || t.starts_with("gsd:")
}

/// Parses an annotation file. `source` names the file in errors; lines and
/// fields are 1-based.
pub fn parse_dota(text: &str, source: &str) -> Result<Vec<DotaRecord>, ParseError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if skip(line) {
            continue;
        }
        let n = i + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 10 {
            return Err(err(source, n, toks.len().min(10) + 1, format!("expected 10 fields, found {}", toks.len())));
        }
        let mut corners = [Point2::default(); 4];
        for (k, c) in corners.iter_mut().enumerate() {
            *c = Point2::new(
                number(source, n, 2 * k + 1, toks[2 * k])?,
                number(source, n, 2 * k + 2, toks[2 * k + 1])?,
            );
        }
        let difficult = match toks[9] {
            "0" => false,
            "1" => true,
            t => return Err(err(source, n, 10, format!("difficult flag must be 0 or 1, found {t:?}"))),
        };
        out.push(DotaRecord {
            corners,
            category: toks[8].to_string(),
            difficult,
        });
    }
    Ok(out)
}

pub fn write_dota(records: &[DotaRecord]) -> String {
    let mut s = String::new();
    for r in records {
        for p in &r.corners {
            let _ = write!(s, "{} {} ", p.x, p.y);
        }
        let _ = writeln!(s, "{} {}", r.category, u8::from(r.difficult));
    }
    s
}

/// Builds a scene from parsed records; `size` is the image side.
pub fn scene_from_dota(id: &str, size: f64, records: &[DotaRecord]) -> Result<Scene, ParseError> {
    let objects = records
        .iter()
        .map(|r| r.to_object())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|m| err(id, 0, 0, m))?;
    Ok(Scene {
        id: id.into(),
        size,
        objects,
    })
}

pub fn scene_to_dota(scene: &Scene) -> String {
    write_dota(&scene.objects.iter().map(DotaRecord::from_object).collect::<Vec<_>>())
}

/// Geometry of a prediction record.
#[derive(Debug, Clone, PartialEq)]
pub enum PredShape {
    Box(RotatedBox),
    Points(Vec<Point2>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub scene: String,
    pub class: usize,
    pub score: f64,
    pub shape: PredShape,
}

impl PredictionRecord {
    /// The points a loss sees: the given points, or a box's corners.
    pub fn points(&self) -> Vec<Point2> {
        match &self.shape {
            PredShape::Box(b) => b.corners().to_vec(),
            PredShape::Points(p) => p.clone(),
        }
    }

    /// Rotated box for evaluation; point sets are fitted. `None` when the
    /// points are collinear.
    pub fn to_detection(&self) -> Option<Detection> {
        let rect = match &self.shape {
            PredShape::Box(b) => *b,
            PredShape::Points(p) => {
                let fit = min_area_rect(p).ok()?;
                if fit.degenerate {
                    return None;
                }
                fit.rect
            }
        };
        Some(Detection {
            scene: self.scene.clone(),
            class: self.class,
            score: self.score,
            rect,
        })
    }
}

pub fn parse_predictions(text: &str, source: &str) -> Result<Vec<PredictionRecord>, ParseError> {
    let mut out = Vec::new();
    // Number count after the score, fixed by the first record.
    let mut layout: Option<usize> = None;
    for (i, line) in text.lines().enumerate() {
        if skip(line) {
            continue;
        }
        let n = i + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 8 {
            return Err(err(source, n, toks.len() + 1, "expected scene, class, score and a box or points"));
        }
        let class = class_index(toks[1]).ok_or_else(|| err(source, n, 2, format!("unknown class {:?}", toks[1])))?;
        let score = number(source, n, 3, toks[2])?;
        if !(0.0..=1.0).contains(&score) {
            return Err(err(source, n, 3, format!("score {score} outside [0, 1]")));
        }
        let nums = toks.len() - 3;
        if nums != 5 && (nums % 2 == 1 || nums < 6) {
            return Err(err(source, n, toks.len(), format!("{nums} numbers is neither a box (5) nor K >= 3 point pairs")));
        }
        match layout {
            Some(l) if l != nums => {
                return Err(err(source, n, 4, format!("{nums} numbers after the score, earlier lines have {l}")))
            }
            _ => layout = Some(nums),
        }
        let vals = toks[3..]
            .iter()
            .enumerate()
            .map(|(k, t)| number(source, n, k + 4, t))
            .collect::<Result<Vec<_>, _>>()?;
        let shape = if nums == 5 {
            PredShape::Box(
                RotatedBox::new(vals[0], vals[1], vals[2], vals[3], vals[4]).map_err(|e| err(source, n, 4, e.to_string()))?,
            )
        } else {
            PredShape::Points(vals.chunks_exact(2).map(|c| Point2::new(c[0], c[1])).collect())
        };
        out.push(PredictionRecord {
            scene: toks[0].to_string(),
            class,
            score,
            shape,
        });
    }
    Ok(out)
}

pub fn write_predictions(records: &[PredictionRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = write!(s, "{} {} {}", r.scene, class_name(r.class), r.score);
        match &r.shape {
            PredShape::Box(b) => {
                let _ = write!(s, " {} {} {} {} {}", b.cx, b.cy, b.w, b.h, b.theta);
            }
            PredShape::Points(p) => {
                for q in p {
                    let _ = write!(s, " {} {}", q.x, q.y);
                }
            }
        }
        s.push('\n');
    }
    s
}

/// Whitespace-separated `x y` pairs, one point per line.
pub fn parse_points(text: &str, source: &str) -> Result<Vec<Point2>, ParseError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if skip(line) {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(err(source, i + 1, toks.len().min(2) + 1, format!("expected 2 fields, found {}", toks.len())));
        }
        out.push(Point2::new(number(source, i + 1, 1, toks[0])?, number(source, i + 1, 2, toks[1])?));
    }
    Ok(out)
}
