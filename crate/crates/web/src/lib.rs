//! Browser bindings: render a synthetic scene into virtual views, recover
//! its target from ground-truth heatmaps, and sample the learning-rate
//! schedule.

use rvt::data::{gen_episode, SyntheticTaskSpec};
use rvt::decode::{backproject_scores, TranslationGrid};
use rvt::geom::{crop_to_workspace, Vec3, WorkspaceBox};
use rvt::nnet::lr_at;
use rvt::render::{cube_views, render_views, ProjectionKind, ViewImage, ViewPreset, ViewSet};
use rvt::train::gt_heatmap;
use rvt::{Error, Result};
use wasm_bindgen::prelude::*;

pub fn parse_preset(name: &str) -> Result<ViewPreset> {
    match name {
        "cube5" => Ok(ViewPreset::Cube5),
        "cube3" => Ok(ViewPreset::Cube3),
        "front1" => Ok(ViewPreset::Front1),
        "rot15" => Ok(ViewPreset::Cube5Rot15),
        _ => Err(Error::InvalidInput(format!("unknown view preset {name}"))),
    }
}

/// One synthetic reach scene seen through a view set.
pub struct Scene {
    pub language: String,
    pub target: Vec3,
    pub views: ViewSet,
    pub images: Vec<ViewImage>,
}

impl Scene {
    pub fn new(seed: u64, preset: &str, res: usize, perspective: bool) -> Result<Self> {
        let spec = SyntheticTaskSpec {
            seed,
            ..SyntheticTaskSpec::default()
        };
        let ep = gen_episode(&spec, 0)?;
        let bounds = WorkspaceBox::default();
        let kind = if perspective {
            ProjectionKind::Perspective
        } else {
            ProjectionKind::Orthographic
        };
        let views = cube_views(&bounds, parse_preset(preset)?, kind)?;
        let cloud = crop_to_workspace(&ep.observation(0).cloud, &bounds);
        let images = render_views(&cloud, &views, res, 1)?;
        Ok(Scene {
            language: ep.language.clone(),
            target: ep.actions[0].translation,
            views,
            images,
        })
    }

    fn res(&self) -> usize {
        self.images[0].width
    }

    pub fn heatmaps(&self) -> Vec<Vec<f64>> {
        let res = self.res();
        self.views
            .cameras
            .iter()
            .map(|c| gt_heatmap(c, self.target, res, res, 1.5).data)
            .collect()
    }

    /// Views side by side as RGBA; the heatmap, scaled to its peak, is
    /// painted in red when given.
    pub fn rgba_strip(&self, heatmaps: Option<&[Vec<f64>]>) -> Vec<u8> {
        let res = self.res();
        let k = self.images.len();
        let mut out = vec![0u8; 4 * res * res * k];
        for (i, img) in self.images.iter().enumerate() {
            let heat = heatmaps.map(|h| {
                let peak = h[i].iter().cloned().fold(0.0, f64::max);
                (h[i].clone(), peak)
            });
            for px in 0..res * res {
                let (row, col) = (px / res, px % res);
                let mut c = img.rgb_at(px);
                if let Some((h, peak)) = &heat {
                    let t = if *peak > 0.0 { h[px] / peak } else { 0.0 };
                    c = [0.4 * c[0] + t, 0.4 * c[1], 0.4 * c[2]];
                }
                let at = 4 * (row * res * k + i * res + col);
                for (j, v) in c.iter().enumerate() {
                    out[at + j] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
                out[at + 3] = 255;
            }
        }
        out
    }

    /// `[target xyz, recovered xyz, error]` after back-projecting the
    /// ground-truth heatmaps onto a `v^3` grid.
    pub fn recover(&self, v: usize) -> Result<[f64; 7]> {
        let res = self.res();
        let grid = TranslationGrid::new(WorkspaceBox::default(), v)?;
        let vol = backproject_scores(&self.heatmaps(), &self.views, res, res, &grid)?;
        let (t, p) = (self.target, vol.point);
        Ok([t.x, t.y, t.z, p.x, p.y, p.z, t.distance(p)])
    }
}

/// `points` evenly spaced samples of the warmup-cosine schedule.
pub fn lr_samples(base_lr: f64, warmup: u64, steps: u64, points: usize) -> Vec<f64> {
    let last = points.saturating_sub(1).max(1) as f64;
    (0..points)
        .map(|i| lr_at((i as f64 / last * steps as f64).round() as u64, base_lr, warmup, steps))
        .collect()
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn view_count(preset: &str) -> std::result::Result<usize, JsError> {
    Ok(parse_preset(preset).map_err(js)?.faces().len())
}

#[wasm_bindgen]
pub fn scene_language(seed: u32) -> std::result::Result<String, JsError> {
    let spec = SyntheticTaskSpec {
        seed: seed as u64,
        ..SyntheticTaskSpec::default()
    };
    Ok(gen_episode(&spec, 0).map_err(js)?.language)
}

/// RGBA strip of every view, `res` pixels tall.
#[wasm_bindgen]
pub fn render_scene(seed: u32, preset: &str, res: usize, perspective: bool, heat: bool) -> std::result::Result<Vec<u8>, JsError> {
    let scene = Scene::new(seed as u64, preset, res, perspective).map_err(js)?;
    let maps = heat.then(|| scene.heatmaps());
    Ok(scene.rgba_strip(maps.as_deref()))
}

#[wasm_bindgen]
pub fn recover_target(seed: u32, preset: &str, res: usize, perspective: bool, grid_v: usize) -> std::result::Result<Vec<f64>, JsError> {
    let scene = Scene::new(seed as u64, preset, res, perspective).map_err(js)?;
    Ok(scene.recover(grid_v).map_err(js)?.to_vec())
}

#[wasm_bindgen]
pub fn lr_curve(base_lr: f64, warmup: u32, steps: u32, points: usize) -> Vec<f64> {
    lr_samples(base_lr, warmup as u64, steps as u64, points)
}
