//! From heatmaps and head logits to an 8-dimensional action.
//!
//! Grid points are cell centers ordered by flat index `(iz * V + iy) * V + ix`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geom::{Vec3, WorkspaceBox};
use crate::model::{ModelOutput, ROT_BIN_DEG};
use crate::render::{VirtualCamera, ViewSet};

pub const DEFAULT_GRID_V: usize = 40;
pub const PAPER_GRID_V: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TranslationGrid {
    pub bounds: WorkspaceBox,
    pub resolution: usize,
}

impl TranslationGrid {
    pub fn new(bounds: WorkspaceBox, resolution: usize) -> Result<Self> {
        if resolution < 2 {
            return Err(invalid(format!("grid resolution {resolution} must be at least 2")));
        }
        Ok(TranslationGrid { bounds, resolution })
    }

    pub fn len(&self) -> usize {
        self.resolution.pow(3)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cell_size(&self) -> Vec3 {
        (self.bounds.max - self.bounds.min) / self.resolution as f64
    }

    pub fn flat_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.resolution + iy) * self.resolution + ix
    }

    pub fn cell(&self, flat: usize) -> (usize, usize, usize) {
        let v = self.resolution;
        (flat % v, (flat / v) % v, flat / (v * v))
    }

    pub fn point(&self, flat: usize) -> Vec3 {
        let (ix, iy, iz) = self.cell(flat);
        let s = self.cell_size();
        self.bounds.min
            + Vec3::new(
                (ix as f64 + 0.5) * s.x,
                (iy as f64 + 0.5) * s.y,
                (iz as f64 + 0.5) * s.z,
            )
    }

    /// Flat index of the cell containing `p`, clamped into the grid.
    pub fn locate(&self, p: Vec3) -> usize {
        let s = self.cell_size();
        let v = self.resolution;
        let axis = |x: f64, lo: f64, w: f64| (((x - lo) / w).floor().max(0.0) as usize).min(v - 1);
        self.flat_index(
            axis(p.x, self.bounds.min.x, s.x),
            axis(p.y, self.bounds.min.y, s.y),
            axis(p.z, self.bounds.min.z, s.z),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionPrediction {
    pub translation: Vec3,
    pub euler: Vec3,
    pub gripper_open: bool,
    pub collision_allowed: bool,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVolume {
    pub scores: Vec<f64>,
    pub best: usize,
    pub point: Vec3,
    pub score: f64,
}

/// Bilinear sample at continuous image position `(u, v)` with pixel centers
/// at half-integers; samples beyond the outermost centers clamp to the edge.
pub fn bilinear_sample(img: &[f64], width: usize, height: usize, u: f64, v: f64) -> f64 {
    let x = (u - 0.5).clamp(0.0, (width - 1) as f64);
    let y = (v - 0.5).clamp(0.0, (height - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
    let (tx, ty) = (x - x0 as f64, y - y0 as f64);
    let at = |r: usize, c: usize| img[r * width + c];
    let top = at(y0, x0) + tx * (at(y0, x1) - at(y0, x0));
    let bottom = at(y1, x0) + tx * (at(y1, x1) - at(y1, x0));
    top + ty * (bottom - top)
}

fn point_score(p: Vec3, heatmaps: &[Vec<f64>], cams: &[VirtualCamera], width: usize, height: usize) -> f64 {
    let mut s = 0.0;
    for (h, cam) in heatmaps.iter().zip(cams) {
        let proj = cam.project(p, width, height);
        if proj.in_bounds {
            s += bilinear_sample(h, width, height, proj.u, proj.v);
        }
    }
    s
}

/// Sums every view's bilinearly sampled heatmap at each grid point; the best
/// point is the first maximum in flat order.
pub fn backproject_scores(
    heatmaps: &[Vec<f64>],
    views: &ViewSet,
    height: usize,
    width: usize,
    grid: &TranslationGrid,
) -> Result<ScoreVolume> {
    if views.is_empty() {
        return Err(invalid("back-projection needs at least one view"));
    }
    if heatmaps.len() != views.len() {
        return Err(Error::shape("backproject_scores", &[heatmaps.len()], &[views.len()]));
    }
    if let Some(h) = heatmaps.iter().find(|h| h.len() != height * width) {
        return Err(Error::shape("backproject_scores heatmap", &[h.len()], &[height, width]));
    }
    let scores: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .with_min_len(1024)
        .map(|i| point_score(grid.point(i), heatmaps, &views.cameras, width, height))
        .collect();
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(ScoreVolume {
        best,
        point: grid.point(best),
        score: scores[best],
        scores,
    })
}

/// Index of the first maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn bin_center(bin: usize) -> f64 {
    ROT_BIN_DEG * bin as f64 + 0.5 * ROT_BIN_DEG
}

/// Bin-center angles of the winning bin per axis; `logits` is `3 x bins`.
pub fn decode_rotation(logits: &[f64]) -> Result<Vec3> {
    if logits.is_empty() || logits.len() % 3 != 0 {
        return Err(Error::shape("decode_rotation", &[logits.len()], &[3, 0]));
    }
    let bins = logits.len() / 3;
    let a: Vec<f64> = (0..3).map(|i| bin_center(argmax(&logits[i * bins..(i + 1) * bins]))).collect();
    Ok(Vec3::new(a[0], a[1], a[2]))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax of a logit vector, max-shifted.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn assemble_action(out: &ModelOutput, views: &ViewSet, res: usize, grid: &TranslationGrid) -> Result<ActionPrediction> {
    let heatmaps: Vec<Vec<f64>> = out.heatmap_logits.iter().map(|l| softmax(l)).collect();
    let vol = backproject_scores(&heatmaps, views, res, res, grid)?;
    Ok(ActionPrediction {
        translation: vol.point,
        euler: decode_rotation(&out.rot_logits)?,
        gripper_open: sigmoid(out.gripper_logit) >= 0.5,
        collision_allowed: sigmoid(out.collision_logit) >= 0.5,
        score: vol.score,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct VolumeSidecar {
    min: [f64; 3],
    max: [f64; 3],
    resolution: usize,
    ordering: String,
    dtype: String,
}

/// Writes `stem.bin` (little-endian f64 scores) and `stem.json`.
pub fn export_score_volume(vol: &ScoreVolume, grid: &TranslationGrid, dir: &Path, stem: &str) -> Result<()> {
    let bytes: Vec<u8> = vol.scores.iter().flat_map(|s| s.to_le_bytes()).collect();
    std::fs::write(dir.join(format!("{stem}.bin")), bytes)?;
    let side = VolumeSidecar {
        min: grid.bounds.min.to_array(),
        max: grid.bounds.max.to_array(),
        resolution: grid.resolution,
        ordering: "z-major: (iz * V + iy) * V + ix".into(),
        dtype: "f64".into(),
    };
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&side)?)?;
    Ok(())
}
