//! Stand-in for an image encoder: per-cell statistics of a rasterized scene
//! on a regular grid, plus each cell's position.

use std::f64::consts::PI;

use super::tape::Matrix;
use crate::synth::Scene;

/// Frequencies of the sine position code, in half-periods per image.
const POS_FREQS: [f64; 4] = [1.0, 2.0, 4.0, 8.0];

/// Encoder output for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneMemory {
    /// One row of raw features per grid cell, row-major over the grid.
    pub tokens: Matrix,
    /// Cell centers in normalized image coordinates.
    pub positions: Vec<[f64; 2]>,
}

/// Width of a raw memory row for `classes` classes.
pub fn memory_feature_dim(classes: usize) -> usize {
    classes + 1 + 2 + 3 + 2 + 4 * POS_FREQS.len()
}

/// Sine code of a normalized position; also used for query positions.
pub fn sine_code(u: f64, v: f64) -> [f64; 16] {
    let mut out = [0.0; 16];
    for (i, f) in POS_FREQS.iter().enumerate() {
        let (a, b) = (PI * f * u, PI * f * v);
        out[4 * i] = a.sin();
        out[4 * i + 1] = a.cos();
        out[4 * i + 2] = b.sin();
        out[4 * i + 3] = b.cos();
    }
    out
}

#[derive(Clone, Copy, Default)]
struct CellStats {
    n: f64,
    sx: f64,
    sy: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

/// Rasterizes `scene` at one sample per pixel center and summarizes each of
/// the `grid x grid` cells: per-class coverage, total coverage, mean offset
/// of covered pixels from the cell center, their second central moments,
/// the cell center, and its sine code. Offsets and moments are in cell
/// units; moments are scaled so a fully covered cell gives 1.
pub fn raster_memory(scene: &Scene, grid: usize, classes: usize) -> SceneMemory {
    let size = scene.size;
    let px = size.round().max(1.0) as usize;
    let cell = size / grid as f64;
    let mut per_class = vec![0.0; grid * grid * classes];
    let mut stats = vec![CellStats::default(); grid * grid];

    for o in &scene.objects {
        let r = &o.rect;
        let (c, s) = (r.theta.cos(), r.theta.sin());
        let ex = 0.5 * (r.w * c.abs() + r.h * s.abs());
        let ey = 0.5 * (r.w * s.abs() + r.h * c.abs());
        let x0 = ((r.cx - ex).floor().max(0.0)) as usize;
        let x1 = ((r.cx + ex).ceil() as usize).min(px);
        let y0 = ((r.cy - ey).floor().max(0.0)) as usize;
        let y1 = ((r.cy + ey).ceil() as usize).min(px);
        for iy in y0..y1 {
            let y = iy as f64 + 0.5;
            for ix in x0..x1 {
                let x = ix as f64 + 0.5;
                let (dx, dy) = (x - r.cx, y - r.cy);
                let along = dx * c + dy * s;
                let across = -dx * s + dy * c;
                if along.abs() > 0.5 * r.w || across.abs() > 0.5 * r.h {
                    continue;
                }
                let gx = ((x / cell) as usize).min(grid - 1);
                let gy = ((y / cell) as usize).min(grid - 1);
                let k = gy * grid + gx;
                if o.class < classes {
                    per_class[k * classes + o.class] += 1.0;
                }
                let u = x / cell - (gx as f64 + 0.5);
                let v = y / cell - (gy as f64 + 0.5);
                let st = &mut stats[k];
                st.n += 1.0;
                st.sx += u;
                st.sy += v;
                st.sxx += u * u;
                st.syy += v * v;
                st.sxy += u * v;
            }
        }
    }

    let dim = memory_feature_dim(classes);
    let mut tokens = Matrix::zeros(grid * grid, dim);
    let mut positions = Vec::with_capacity(grid * grid);
    let cell_px = cell * cell;
    for gy in 0..grid {
        for gx in 0..grid {
            let k = gy * grid + gx;
            let row = tokens.row_mut(k);
            for c in 0..classes {
                row[c] = per_class[k * classes + c] / cell_px;
            }
            let st = stats[k];
            let mut j = classes;
            row[j] = st.n / cell_px;
            j += 1;
            if st.n > 0.0 {
                let (mx, my) = (st.sx / st.n, st.sy / st.n);
                row[j] = mx;
                row[j + 1] = my;
                row[j + 2] = 12.0 * (st.sxx / st.n - mx * mx);
                row[j + 3] = 12.0 * (st.syy / st.n - my * my);
                row[j + 4] = 12.0 * (st.sxy / st.n - mx * my);
            }
            j += 5;
            let (u, v) = ((gx as f64 + 0.5) / grid as f64, (gy as f64 + 0.5) / grid as f64);
            row[j] = u;
            row[j + 1] = v;
            j += 2;
            row[j..j + 16].copy_from_slice(&sine_code(u, v));
            positions.push([u, v]);
        }
    }
    SceneMemory { tokens, positions }
}
