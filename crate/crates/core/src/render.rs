//! Point-cloud re-rendering into 7-channel virtual views.
//!
//! Cameras follow the OpenGL convention: the camera looks along its local
//! -Z axis, +X is image right and +Y is image up. Pixel `(col, row)` covers
//! `[col, col + 1) x [row, row + 1)`; rows grow downwards.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geom::{Mat3, PointCloud, RigidTransform, Vec3, WorkspaceBox};

pub const DEFAULT_SPLAT_RADIUS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    Orthographic,
    Perspective,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Orthographic { half_width: f64, half_height: f64 },
    Perspective { fov_y_deg: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VirtualCamera {
    pub projection: Projection,
    /// camera -> world
    pub pose: RigidTransform,
    pub near: f64,
    pub far: f64,
}

/// Result of projecting a world point into a camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelProjection {
    pub u: f64,
    pub v: f64,
    /// distance along the viewing axis
    pub depth: f64,
    pub in_bounds: bool,
}

impl VirtualCamera {
    pub fn new(projection: Projection, pose: RigidTransform, near: f64, far: f64) -> Result<Self> {
        if !(near < far) {
            return Err(invalid(format!("camera near {near} must be below far {far}")));
        }
        match projection {
            Projection::Orthographic {
                half_width,
                half_height,
            } if !(half_width > 0.0 && half_height > 0.0) => {
                return Err(invalid("orthographic extents must be positive"));
            }
            Projection::Perspective { fov_y_deg } if !(fov_y_deg > 0.0 && fov_y_deg < 180.0) => {
                return Err(invalid(format!("fov_y {fov_y_deg} outside (0, 180)")));
            }
            _ => {}
        }
        Ok(VirtualCamera {
            projection,
            pose,
            near,
            far,
        })
    }

    /// World-frame unit vector the camera looks along.
    pub fn viewing_axis(&self) -> Vec3 {
        -self.pose.rotation.col(2)
    }

    pub fn eye(&self) -> Vec3 {
        self.pose.translation
    }

    pub fn kind(&self) -> ProjectionKind {
        match self.projection {
            Projection::Orthographic { .. } => ProjectionKind::Orthographic,
            Projection::Perspective { .. } => ProjectionKind::Perspective,
        }
    }

    pub fn project(&self, p: Vec3, width: usize, height: usize) -> PixelProjection {
        let c = self.pose.inverse().apply(p);
        let depth = -c.z;
        let (w, h) = (width as f64, height as f64);
        let (u, v) = match self.projection {
            Projection::Orthographic {
                half_width,
                half_height,
            } => (
                (c.x + half_width) / (2.0 * half_width) * w,
                (half_height - c.y) / (2.0 * half_height) * h,
            ),
            Projection::Perspective { fov_y_deg } => {
                if depth <= 0.0 {
                    return PixelProjection {
                        u: f64::NAN,
                        v: f64::NAN,
                        depth,
                        in_bounds: false,
                    };
                }
                let f = 0.5 * h / (0.5 * fov_y_deg.to_radians()).tan();
                (0.5 * w + f * c.x / depth, 0.5 * h - f * c.y / depth)
            }
        };
        let in_bounds = u >= 0.0
            && u < w
            && v >= 0.0
            && v < h
            && depth >= self.near
            && depth <= self.far;
        PixelProjection {
            u,
            v,
            depth,
            in_bounds,
        }
    }

    pub fn normalized_depth(&self, depth: f64) -> f64 {
        (depth - self.near) / (self.far - self.near)
    }
}

/// Builds a camera at `eye` looking at `target`, with `up` projected into
/// the image plane as the image's up direction.
pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<RigidTransform> {
    let back = (eye - target).normalized();
    let right = up.cross(back);
    if !(right.norm() > 1e-9) {
        return Err(invalid("look_at: up vector is parallel to the viewing axis"));
    }
    let right = right.normalized();
    let true_up = back.cross(right);
    RigidTransform::new(Mat3::from_cols(right, true_up, back), eye)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewPreset {
    Cube5,
    Cube3,
    Front1,
    Cube5Rot15,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CubeFace {
    Top,
    Front,
    Back,
    Left,
    Right,
}

impl CubeFace {
    /// Direction from the box center towards the camera, and image up.
    fn frame(self) -> (Vec3, Vec3) {
        match self {
            // up = -x keeps the top image's columns aligned with the front view
            CubeFace::Top => (Vec3::Z, -Vec3::X),
            CubeFace::Front => (Vec3::X, Vec3::Z),
            CubeFace::Back => (-Vec3::X, Vec3::Z),
            CubeFace::Left => (Vec3::Y, Vec3::Z),
            CubeFace::Right => (-Vec3::Y, Vec3::Z),
        }
    }
}

impl ViewPreset {
    pub fn faces(self) -> &'static [CubeFace] {
        use CubeFace::*;
        match self {
            ViewPreset::Cube5 | ViewPreset::Cube5Rot15 => &[Top, Front, Back, Left, Right],
            ViewPreset::Cube3 => &[Front, Top, Left],
            ViewPreset::Front1 => &[Front],
            ViewPreset::Custom => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub cameras: Vec<VirtualCamera>,
    pub preset: ViewPreset,
}

impl ViewSet {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn custom(cameras: Vec<VirtualCamera>) -> Result<Self> {
        if cameras.is_empty() {
            return Err(invalid("a view set needs at least one camera"));
        }
        Ok(ViewSet {
            cameras,
            preset: ViewPreset::Custom,
        })
    }
}

/// Distance from box center to eye, and the near/far planes shared by every
/// generated camera. The bounding sphere keeps rotated presets covered.
fn camera_distances(bounds: &WorkspaceBox) -> (f64, f64, f64) {
    let radius = bounds.half_extents().norm();
    (2.0 * radius, radius, 3.0 * radius)
}

/// A camera at `eye` aimed at the workspace center whose frustum covers the
/// whole box.
pub fn workspace_camera(
    bounds: &WorkspaceBox,
    eye: Vec3,
    up: Vec3,
    kind: ProjectionKind,
) -> Result<VirtualCamera> {
    let center = bounds.center();
    let pose = look_at(eye, center, up)?;
    camera_for_pose(bounds, pose, kind)
}

fn camera_for_pose(
    bounds: &WorkspaceBox,
    pose: RigidTransform,
    kind: ProjectionKind,
) -> Result<VirtualCamera> {
    let half = bounds.half_extents();
    let radius = half.norm();
    let dist = pose.translation.distance(bounds.center());
    let (near, far) = ((dist - radius).max(1e-3), dist + radius);
    let projection = match kind {
        ProjectionKind::Orthographic => {
            let support = |axis: Vec3| {
                axis.x.abs() * half.x + axis.y.abs() * half.y + axis.z.abs() * half.z
            };
            let extent = support(pose.rotation.col(0)).max(support(pose.rotation.col(1)));
            Projection::Orthographic {
                half_width: extent,
                half_height: extent,
            }
        }
        ProjectionKind::Perspective => {
            if dist <= radius {
                return Err(invalid("perspective camera inside the workspace sphere"));
            }
            Projection::Perspective {
                fov_y_deg: 2.0 * (radius / dist).asin().to_degrees(),
            }
        }
    };
    VirtualCamera::new(projection, pose, near, far)
}

/// Cameras on the box face centers, each looking at the box center.
pub fn cube_views(bounds: &WorkspaceBox, preset: ViewPreset, kind: ProjectionKind) -> Result<ViewSet> {
    if preset == ViewPreset::Custom {
        return Err(invalid("custom view sets are built from explicit cameras"));
    }
    let center = bounds.center();
    let (dist, _, _) = camera_distances(bounds);
    let spin = if preset == ViewPreset::Cube5Rot15 {
        let r = Mat3::rot_z(15.0);
        RigidTransform::from_translation(center)
            .compose(&RigidTransform::from_rotation(r))
            .compose(&RigidTransform::from_translation(-center))
    } else {
        RigidTransform::IDENTITY
    };
    let cameras = preset
        .faces()
        .iter()
        .map(|face| {
            let (dir, up) = face.frame();
            let pose = spin.compose(&look_at(center + dir * dist, center, up)?);
            camera_for_pose(bounds, pose, kind)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ViewSet { cameras, preset })
}

/// Rendered 7-channel image. All buffers are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewImage {
    pub height: usize,
    pub width: usize,
    /// `H * W * 3`, in [0, 1]
    pub rgb: Vec<f64>,
    /// `H * W`, normalized over [near, far]; background is exactly 1
    pub depth: Vec<f64>,
    /// `H * W * 3`, world frame, meters; background is 0
    pub xyz: Vec<f64>,
}

impl ViewImage {
    pub fn background(height: usize, width: usize) -> Self {
        let n = height * width;
        ViewImage {
            height,
            width,
            rgb: vec![0.0; 3 * n],
            depth: vec![1.0; n],
            xyz: vec![0.0; 3 * n],
        }
    }

    pub fn is_foreground(&self, pixel: usize) -> bool {
        self.depth[pixel] < 1.0
    }

    pub fn rgb_at(&self, pixel: usize) -> [f64; 3] {
        [self.rgb[3 * pixel], self.rgb[3 * pixel + 1], self.rgb[3 * pixel + 2]]
    }

    pub fn xyz_at(&self, pixel: usize) -> Vec3 {
        Vec3::new(self.xyz[3 * pixel], self.xyz[3 * pixel + 1], self.xyz[3 * pixel + 2])
    }
}

/// Renders `cloud` and also returns, per pixel, the index of the point that
/// won the z-test.
pub fn render_indexed(
    cloud: &PointCloud,
    cam: &VirtualCamera,
    height: usize,
    width: usize,
    splat_radius: usize,
) -> Result<(ViewImage, Vec<Option<usize>>)> {
    if height == 0 || width == 0 {
        return Err(invalid("render target must be at least 1x1"));
    }
    let mut best: Vec<Option<(f64, usize)>> = vec![None; height * width];
    let r = splat_radius as isize;
    for (idx, &p) in cloud.positions.iter().enumerate() {
        let proj = cam.project(p, width, height);
        // depth == far would normalize to the background value
        if !proj.in_bounds || proj.depth >= cam.far {
            continue;
        }
        let (col, row) = (proj.u.floor() as isize, proj.v.floor() as isize);
        for y in (row - r).max(0)..=(row + r).min(height as isize - 1) {
            for x in (col - r).max(0)..=(col + r).min(width as isize - 1) {
                let slot = &mut best[y as usize * width + x as usize];
                match slot {
                    Some((d, _)) if *d <= proj.depth => {}
                    _ => *slot = Some((proj.depth, idx)),
                }
            }
        }
    }

    let mut img = ViewImage::background(height, width);
    let winners: Vec<Option<usize>> = best.iter().map(|b| b.map(|(_, i)| i)).collect();
    for (pixel, entry) in best.iter().enumerate() {
        if let Some((d, idx)) = *entry {
            let p = cloud.positions[idx];
            img.rgb[3 * pixel..3 * pixel + 3].copy_from_slice(&cloud.colors[idx]);
            img.depth[pixel] = cam.normalized_depth(d);
            img.xyz[3 * pixel..3 * pixel + 3].copy_from_slice(&p.to_array());
        }
    }
    Ok((img, winners))
}

pub fn render(
    cloud: &PointCloud,
    cam: &VirtualCamera,
    height: usize,
    width: usize,
    splat_radius: usize,
) -> Result<ViewImage> {
    render_indexed(cloud, cam, height, width, splat_radius).map(|(img, _)| img)
}

/// Renders every camera of a view set at `res x res`.
pub fn render_views(
    cloud: &PointCloud,
    views: &ViewSet,
    res: usize,
    splat_radius: usize,
) -> Result<Vec<ViewImage>> {
    views
        .cameras
        .par_iter()
        .map(|cam| render(cloud, cam, res, res, splat_radius))
        .collect()
}

fn to_byte(v: f64, lo: f64, hi: f64) -> u8 {
    if hi > lo {
        (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
    } else {
        0
    }
}

/// Writes a binary PPM (P6) from an `H * W * 3` buffer in [0, 1].
pub fn write_ppm(path: &Path, rgb: &[f64], width: usize, height: usize) -> Result<()> {
    let mut out = Vec::with_capacity(rgb.len() + 32);
    write!(out, "P6\n{width} {height}\n255\n")?;
    out.extend(rgb.iter().map(|&v| to_byte(v, 0.0, 1.0)));
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes a binary PGM (P5), linearly mapping `[lo, hi]` to `[0, 255]`.
pub fn write_pgm(path: &Path, gray: &[f64], width: usize, height: usize, lo: f64, hi: f64) -> Result<()> {
    let mut out = Vec::with_capacity(gray.len() + 32);
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.extend(gray.iter().map(|&v| to_byte(v, lo, hi)));
    std::fs::write(path, out)?;
    Ok(())
}

fn range_of(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}

/// Exports one view as `<stem>_rgb.ppm`, `<stem>_depth.pgm`,
/// `<stem>_{x,y,z}.pgm` and a `<stem>.txt` sidecar with the value range
/// each grayscale image was mapped from. Returns the written paths.
pub fn export_view(view: &ViewImage, dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let (w, h) = (view.width, view.height);
    let mut written = Vec::new();
    let mut sidecar = String::new();

    let rgb_path = dir.join(format!("{stem}_rgb.ppm"));
    write_ppm(&rgb_path, &view.rgb, w, h)?;
    written.push(rgb_path);

    let fg: Vec<usize> = (0..w * h).filter(|&p| view.is_foreground(p)).collect();
    let depth_path = dir.join(format!("{stem}_depth.pgm"));
    write_pgm(&depth_path, &view.depth, w, h, 0.0, 1.0)?;
    writeln!(sidecar, "depth\tmin=0\tmax=1\tbackground=1").unwrap();
    written.push(depth_path);

    for (axis, name) in ["x", "y", "z"].iter().enumerate() {
        let channel: Vec<f64> = (0..w * h).map(|p| view.xyz[3 * p + axis]).collect();
        let (lo, hi) = if fg.is_empty() {
            (0.0, 0.0)
        } else {
            range_of(fg.iter().map(|&p| channel[p]))
        };
        let path = dir.join(format!("{stem}_{name}.pgm"));
        write_pgm(&path, &channel, w, h, lo, hi)?;
        writeln!(sidecar, "{name}\tmin={lo}\tmax={hi}").unwrap();
        written.push(path);
    }
    let side = dir.join(format!("{stem}.txt"));
    std::fs::write(&side, sidecar)?;
    written.push(side);
    Ok(written)
}
