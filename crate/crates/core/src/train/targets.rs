use crate::geom::{wrap_degrees, Vec3};
use crate::model::ROT_BIN_DEG;
use crate::render::{VirtualCamera, ViewSet};

pub const DEFAULT_SIGMA_PX: f64 = 1.5;
/// Truncation half-width in units of sigma.
pub const TRUNCATION_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// `H * W`; sums to 1 when visible, all zero otherwise
    pub data: Vec<f64>,
    pub visible: bool,
}

/// Truncated Gaussian around the projection of `p`, normalized over the
/// square window `|du|, |dv| <= 3 sigma` of pixel centers.
pub fn gt_heatmap(cam: &VirtualCamera, p: Vec3, height: usize, width: usize, sigma_px: f64) -> Heatmap {
    let mut data = vec![0.0; height * width];
    let proj = cam.project(p, width, height);
    if !proj.in_bounds {
        return Heatmap { data, visible: false };
    }
    let reach = TRUNCATION_SIGMAS * sigma_px;
    let span = |center: f64, n: usize| {
        let lo = (center - reach - 0.5).ceil().max(0.0) as usize;
        let hi = ((center + reach - 0.5).floor() as isize).min(n as isize - 1);
        (lo, hi)
    };
    let (c0, c1) = span(proj.u, width);
    let (r0, r1) = span(proj.v, height);
    let mut total = 0.0;
    for r in r0 as isize..=r1 {
        let dv = r as f64 + 0.5 - proj.v;
        for c in c0 as isize..=c1 {
            let du = c as f64 + 0.5 - proj.u;
            let g = (-(du * du + dv * dv) / (2.0 * sigma_px * sigma_px)).exp();
            data[r as usize * width + c as usize] = g;
            total += g;
        }
    }
    for x in &mut data {
        *x /= total;
    }
    Heatmap { data, visible: true }
}

/// `floor(wrap(theta) / 5)` per axis.
pub fn rot_to_bins(euler: Vec3) -> [usize; 3] {
    let bins = (360.0 / ROT_BIN_DEG) as usize;
    [euler.x, euler.y, euler.z].map(|a| ((wrap_degrees(a) / ROT_BIN_DEG).floor() as usize).min(bins - 1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtTargets {
    pub heatmaps: Vec<Vec<f64>>,
    pub visible: Vec<bool>,
    pub rot_bins: [usize; 3],
    pub gripper: f64,
    pub collision: f64,
}

impl GtTargets {
    pub fn build(
        views: &ViewSet,
        res: usize,
        translation: Vec3,
        euler: Vec3,
        gripper_open: bool,
        collision_allowed: bool,
        sigma_px: f64,
    ) -> Self {
        let maps: Vec<Heatmap> = views
            .cameras
            .iter()
            .map(|cam| gt_heatmap(cam, translation, res, res, sigma_px))
            .collect();
        GtTargets {
            visible: maps.iter().map(|m| m.visible).collect(),
            heatmaps: maps.into_iter().map(|m| m.data).collect(),
            rot_bins: rot_to_bins(euler),
            gripper: if gripper_open { 1.0 } else { 0.0 },
            collision: if collision_allowed { 1.0 } else { 0.0 },
        }
    }

    pub fn any_visible(&self) -> bool {
        self.visible.iter().any(|&v| v)
    }
}
